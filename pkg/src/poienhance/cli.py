"""Command-line pipeline.

Stages communicate only through files, so each can be rerun independently:

    make-synthetic     write a synthetic check-in corpus (demo/testing)
    derive-attributes  corpus -> attributes.jsonl
    gen-prompts        corpus + attributes -> prompts.jsonl
    extract-features   prompts -> populated feature cache + manifest
    train-base         corpus -> base_embeddings.txt (skip-gram reference)
    train-enhancer     prompts + cache + base embeddings -> checkpoints
    enhance            checkpoint + inputs -> fused_embeddings.txt
    eval-poirec / eval-classify / eval-flow / eval-cluster
    compare            Euclidean distance between two POI embeddings

Global flags on every subcommand: --config (flat YAML), --seed, --out.
Exit codes: 0 success, 1 user error (bad input/config), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import UserError

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    # Usage mistakes are user errors (exit 1), not internal errors.
    def error(self, message):
        raise UserError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat YAML config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the config output directory")


def _resolve_config(args):
    from .config import echo_config, load_config

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides=overrides)
    out_dir = Path(cfg.out_dir)
    echo_config(cfg, out_dir)
    _write_run_info(out_dir, cfg, getattr(args, "argv", sys.argv[1:]))
    return cfg, out_dir


def _write_run_info(out_dir: Path, cfg, argv) -> None:
    import numpy
    import torch

    info = {
        "command": list(argv),
        "seed": cfg.seed,
        "versions": {
            "poienhance": __version__,
            "numpy": numpy.__version__,
            "torch": torch.__version__,
            "python": sys.version.split()[0],
        },
    }
    (out_dir / "run_info.json").write_text(json.dumps(info, indent=2))


def _load_corpus(cfg):
    from .corpus import filter_dataset, load_checkins, split_sequences

    if not cfg.dataset:
        raise UserError("config key 'dataset' must point at a check-in file")
    ds = load_checkins(cfg.dataset, fmt=cfg.format)
    ds = filter_dataset(
        ds, min_poi_checkins=cfg.min_poi_checkins, min_seq_len=cfg.min_seq_len
    )
    test, val, train = split_sequences(ds, ratios=cfg.split_ratios, seed=cfg.seed)
    return ds, test, val, train


def _build_geocoder(cfg, out_dir: Path):
    from .geocode import DEFAULT_ENDPOINT, FixtureGeocoder, GeocodeClient

    if cfg.geocode_endpoint or cfg.geocode_cache_dir:
        cache = cfg.geocode_cache_dir or str(out_dir / "geocode_cache")
        return GeocodeClient(
            cache,
            endpoint=cfg.geocode_endpoint or DEFAULT_ENDPOINT,
            email=cfg.geocode_email or "",
        )
    logger.info("no geocode endpoint or cache configured; addresses stay empty")
    return FixtureGeocoder()


def _backend(cfg):
    from .backends import build_backend

    return build_backend(
        cfg.backend,
        dim=cfg.feature_dim,
        seed=cfg.seed,
        pooling=cfg.pooling,
        endpoint=cfg.backend_endpoint or "",
        model_path=cfg.backend_model_path or "",
    )


def _cache_dir(cfg, out_dir: Path, flag_value=None) -> Path:
    if flag_value:
        return Path(flag_value)
    if cfg.cache_dir:
        return Path(cfg.cache_dir)
    return out_dir / "feature_cache"


def _bundles(cfg, out_dir, prompts_path, features_dir):
    from .features import extract_corpus
    from .prompts import load_prompts

    path = Path(prompts_path) if prompts_path else out_dir / "prompts.jsonl"
    if not path.exists():
        raise UserError(f"prompt file {path} not found; run gen-prompts first")
    prompts = load_prompts(path)
    backend = _backend(cfg)
    cache_dir = _cache_dir(cfg, out_dir, features_dir)
    bundles, missing = extract_corpus(
        prompts, backend, cache_dir, max_workers=cfg.extract_workers
    )
    if missing:
        for pid, kind, reason in missing[:10]:
            logger.warning("missing feature poi=%s kind=%s: %s", pid, kind, reason)
        raise UserError(f"{len(missing)} prompts failed feature extraction")
    return bundles, backend


def _load_base(cfg, path, dataset, allow_missing=False):
    from .baselines import align_to_dataset, load_embeddings

    emb = load_embeddings(path, role="base")
    if emb.dim != cfg.dim:
        raise UserError(
            f"base embeddings are {emb.dim}-dimensional but config dim={cfg.dim}"
        )
    return align_to_dataset(emb, dataset, allow_missing=allow_missing)


def _print_report(report, out_dir: Path, name: str) -> None:
    payload = asdict(report)
    (out_dir / f"metrics_{name}.json").write_text(json.dumps(payload, indent=2))
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    from .corpus import save_checkins
    from .synthetic import synthetic_city

    cfg, out_dir = _resolve_config(args)
    ds = synthetic_city(
        n_pois=args.pois,
        n_categories=args.categories,
        n_users=args.users,
        seed=cfg.seed,
    )
    target = Path(args.dataset_out or (out_dir / "synthetic_checkins.tsv"))
    save_checkins(ds, target)
    print(f"wrote {ds.n_checkins} check-ins over {ds.n_pois} POIs to {target}")
    return 0


def cmd_derive_attributes(args) -> int:
    from .attributes import derive_attributes, save_attributes

    cfg, out_dir = _resolve_config(args)
    ds, _test, _val, _train = _load_corpus(cfg)
    geocoder = _build_geocoder(cfg, out_dir)
    attrs = derive_attributes(ds, geocoder, side_km=cfg.side_km)
    save_attributes(attrs, out_dir / "attributes.jsonl")
    print(f"derived attributes for {len(attrs)} POIs -> {out_dir / 'attributes.jsonl'}")
    return 0


def cmd_gen_prompts(args) -> int:
    from .attributes import load_attributes
    from .prompts import PromptKind, generate_corpus_prompts, save_prompts

    cfg, out_dir = _resolve_config(args)
    ds, *_ = _load_corpus(cfg)
    attrs_path = Path(args.attributes or (out_dir / "attributes.jsonl"))
    if not attrs_path.exists():
        raise UserError(f"{attrs_path} not found; run derive-attributes first")
    attrs = load_attributes(attrs_path)
    if args.kinds:
        try:
            kinds = tuple(PromptKind(k) for k in args.kinds)
        except ValueError as exc:
            raise UserError(str(exc)) from exc
    else:
        kinds = tuple(PromptKind)
    prompts = generate_corpus_prompts(ds, attrs, kinds)
    save_prompts(prompts, out_dir / "prompts.jsonl")
    print(f"wrote {len(prompts)} prompts -> {out_dir / 'prompts.jsonl'}")
    return 0


def cmd_extract_features(args) -> int:
    from .features import extract_corpus
    from .prompts import load_prompts

    cfg, out_dir = _resolve_config(args)
    prompts_path = Path(args.prompts or (out_dir / "prompts.jsonl"))
    if not prompts_path.exists():
        raise UserError(f"{prompts_path} not found; run gen-prompts first")
    prompts = load_prompts(prompts_path)
    backend = _backend(cfg)
    cache_dir = _cache_dir(cfg, out_dir, args.features)
    bundles, missing = extract_corpus(
        prompts, backend, cache_dir, max_workers=cfg.extract_workers
    )
    manifest = {
        "backend_id": backend.descriptor.backend_id,
        "dim": backend.descriptor.dim,
        "pois": len(bundles),
        "missing": [{"poi_id": p, "kind": k, "reason": r} for p, k, r in missing],
        "cache_dir": str(cache_dir),
    }
    (out_dir / "features_manifest.json").write_text(json.dumps(manifest, indent=2))
    print(
        f"extracted features for {len(bundles)} POIs "
        f"({len(missing)} missing) -> cache {cache_dir}"
    )
    return 1 if missing else 0


def cmd_train_base(args) -> int:
    from .baselines import save_embeddings, train_skipgram_reference

    cfg, out_dir = _resolve_config(args)
    _ds, _test, _val, train = _load_corpus(cfg)
    emb = train_skipgram_reference(
        train,
        dim=cfg.dim,
        window=cfg.skipgram_window,
        negatives=cfg.skipgram_negatives,
        epochs=cfg.skipgram_epochs,
        seed=cfg.seed,
    )
    target = Path(args.embeddings_out or (out_dir / "base_embeddings.txt"))
    save_embeddings(emb, target)
    print(f"trained skip-gram base embeddings ({emb.dim}d) -> {target}")
    return 0


def cmd_train_enhancer(args) -> int:
    import torch

    from .model import EnhancerNet
    from .prompts import TEMPLATE_VERSION
    from .sampling import build_batches, dump_batches, positive_sets
    from .training import train_enhancer

    cfg, out_dir = _resolve_config(args)
    ds, _test, _val, train = _load_corpus(cfg)
    from .attributes import load_attributes

    attrs_path = Path(args.attributes or (out_dir / "attributes.jsonl"))
    if not attrs_path.exists():
        raise UserError(f"{attrs_path} not found; run derive-attributes first")
    attrs = load_attributes(attrs_path)
    bundles, backend = _bundles(cfg, out_dir, args.prompts, args.features)
    base = _load_base(cfg, args.base_embeddings, ds)

    sampler_cfg = cfg.sampler_config()
    positives = positive_sets(ds, train, attrs, sampler_cfg)
    batches = build_batches(ds, positives, sampler_cfg)
    if args.dump_batches:
        dump_batches(batches, out_dir / "batches.jsonl")

    torch.manual_seed(cfg.seed)
    model = EnhancerNet(cfg.hyperparams(), seed=cfg.seed)
    history = train_enhancer(
        model,
        batches,
        bundles,
        base,
        cfg.train_config(),
        out_dir=out_dir,
        template_version=TEMPLATE_VERSION,
    )
    print(
        f"trained {cfg.epochs} epochs over {len(batches)} batches; "
        f"final loss {history[-1].loss:.4f}; checkpoints in {out_dir}"
    )
    return 0


def cmd_enhance(args) -> int:
    from .baselines import save_embeddings
    from .model import enhance, load_checkpoint

    cfg, out_dir = _resolve_config(args)
    ds, *_ = _load_corpus(cfg)
    model, _header = load_checkpoint(args.checkpoint)
    bundles, _backend = _bundles(cfg, out_dir, args.prompts, args.features)
    base = _load_base(cfg, args.base_embeddings, ds, allow_missing=args.allow_missing)
    fused = enhance(
        model,
        bundles,
        base,
        chunk_size=cfg.chunk_size,
        on_missing="skip" if args.allow_missing else "fatal",
    )
    target = Path(args.embeddings_out or (out_dir / "fused_embeddings.txt"))
    save_embeddings(fused, target)
    print(f"wrote {len(fused.poi_ids)} fused embeddings -> {target}")
    return 0


def _eval_common(args, task: str):
    cfg, out_dir = _resolve_config(args)
    ds, test, _val, train = _load_corpus(cfg)
    from .baselines import align_to_dataset, load_embeddings

    emb = load_embeddings(args.embeddings, role=args.role)
    emb = align_to_dataset(emb, ds, allow_missing=args.allow_missing)
    return cfg, out_dir, ds, test, train, emb


def cmd_eval_poirec(args) -> int:
    from .downstream import eval_recommendation

    cfg, out_dir, _ds, test, train, emb = _eval_common(args, "recommendation")
    report = eval_recommendation(emb, train, test, cfg.task_config("recommendation"))
    _print_report(report, out_dir, "poirec")
    return 0


def cmd_eval_classify(args) -> int:
    from .downstream import eval_classification

    cfg, out_dir, _ds, test, train, emb = _eval_common(args, "classification")
    report = eval_classification(emb, train, test, cfg.task_config("classification"))
    _print_report(report, out_dir, "classify")
    return 0


def cmd_eval_flow(args) -> int:
    from .downstream import build_flow_series, eval_flow

    cfg, out_dir, ds, _test, _train, emb = _eval_common(args, "flow")
    series = build_flow_series(ds, cfg.task_config("flow"))
    report = eval_flow(emb, series, cfg.task_config("flow"))
    _print_report(report, out_dir, "flow")
    return 0


def cmd_eval_cluster(args) -> int:
    from .downstream import eval_cluster

    cfg, out_dir, ds, _test, _train, emb = _eval_common(args, "cluster")
    report = eval_cluster(emb, ds, seed=cfg.seed)
    _print_report(report, out_dir, "cluster")
    return 0


def cmd_compare(args) -> int:
    from .baselines import load_embeddings
    from .downstream import pairwise_distance

    _cfg, _out_dir = _resolve_config(args)
    emb = load_embeddings(args.embeddings, role="fused")
    dist = pairwise_distance(emb, args.id_a, args.id_b)
    print(f"euclidean_distance({args.id_a}, {args.id_b}) = {dist:.6f}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="poienhance", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(func=func)
        return p

    p = add("make-synthetic", cmd_make_synthetic, "write a synthetic corpus")
    p.add_argument("--pois", type=int, default=500)
    p.add_argument("--categories", type=int, default=10)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--dataset-out", help="target TSV path")

    add("derive-attributes", cmd_derive_attributes, "derive POI attributes")

    p = add("gen-prompts", cmd_gen_prompts, "render prompt files")
    p.add_argument("--attributes", help="attributes JSONL (default <out>/attributes.jsonl)")
    p.add_argument(
        "--kinds",
        nargs="+",
        help="prompt kinds to render (default: all three)",
    )

    p = add("extract-features", cmd_extract_features, "run the feature backend")
    p.add_argument("--prompts", help="prompt JSONL (default <out>/prompts.jsonl)")
    p.add_argument("--features", help="feature cache directory")

    p = add("train-base", cmd_train_base, "train reference skip-gram embeddings")
    p.add_argument("--embeddings-out", help="target path for base embeddings")

    p = add("train-enhancer", cmd_train_enhancer, "contrastive enhancer training")
    p.add_argument("--base-embeddings", required=True)
    p.add_argument("--features", help="feature cache directory")
    p.add_argument("--prompts", help="prompt JSONL (default <out>/prompts.jsonl)")
    p.add_argument("--attributes", help="attributes JSONL")
    p.add_argument("--dump-batches", action="store_true", help="write batches.jsonl")

    p = add("enhance", cmd_enhance, "produce fused embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--base-embeddings", required=True)
    p.add_argument("--features", help="feature cache directory")
    p.add_argument("--prompts", help="prompt JSONL (default <out>/prompts.jsonl)")
    p.add_argument("--embeddings-out", help="target path for fused embeddings")
    p.add_argument("--allow-missing", action="store_true")

    for name, func, help_text in (
        ("eval-poirec", cmd_eval_poirec, "next-POI recommendation"),
        ("eval-classify", cmd_eval_classify, "user identification"),
        ("eval-flow", cmd_eval_flow, "visitor-flow prediction"),
        ("eval-cluster", cmd_eval_cluster, "category clustering NMI"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--embeddings", required=True)
        p.add_argument("--role", default="fused", help="provenance label for reports")
        p.add_argument("--allow-missing", action="store_true")

    p = add("compare", cmd_compare, "Euclidean distance between two POIs")
    p.add_argument("--embeddings", required=True)
    p.add_argument("id_a", type=int)
    p.add_argument("id_b", type=int)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        args.argv = list(argv)
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception:  # internal errors get a traceback and exit code 2
        import traceback

        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
