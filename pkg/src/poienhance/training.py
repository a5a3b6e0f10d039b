"""Contrastive training of the enhancement network.

Two losses, summed per batch:

* a contrastive term: the anchor row should be most similar (cosine, sharpened
  by a temperature) to its positive among all non-anchor rows;
* a similarity preservation term: the mean absolute gap between the pairwise
  cosine matrix of the fused outputs and that of the base embeddings, which
  anchors the fused space to the geometry the base model learned.

The optimizer is AdamW with decoupled weight decay. Each epoch shuffles batch
order with an epoch-derived seed, appends one JSONL line to the training log,
and refreshes the last/best checkpoints.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import UserError
from .model import EmbeddingMatrix, EnhancerNet, save_checkpoint
from .sampling import TrainingBatch

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-3
    temperature: float = 0.1
    grad_clip: float | None = None  # max grad norm; off by default
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise UserError("epochs must be >= 1")
        if self.lr <= 0 or self.temperature <= 0:
            raise UserError("lr and temperature must be positive")
        if self.weight_decay < 0:
            raise UserError("weight_decay must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise UserError("grad_clip must be positive when set")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    contrast: float
    similarity: float
    seconds: float
    batches: int


def _check_nonzero_rows(x: torch.Tensor, what: str) -> None:
    norms = x.norm(dim=1)
    if bool((norms == 0).any()):
        raise UserError(f"{what} contains a zero row; cosine similarity undefined")


def cosine_matrix(x: torch.Tensor) -> torch.Tensor:
    normed = torch.nn.functional.normalize(x, dim=1, eps=1e-12)
    return normed @ normed.T


def infonce_loss(fused: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """Anchor-vs-rest cross entropy with the positive at row 1.

    The denominator runs over every non-anchor row, positive included, so a
    batch of m rows compares the positive against m - 2 negatives.
    """
    if fused.shape[0] < 3:
        raise UserError("contrastive batch needs at least 3 rows")
    _check_nonzero_rows(fused, "contrastive batch")
    anchor = torch.nn.functional.normalize(fused[0:1], dim=1, eps=1e-12)
    rest = torch.nn.functional.normalize(fused[1:], dim=1, eps=1e-12)
    sims = (rest @ anchor.T).squeeze(1) / temperature
    return torch.logsumexp(sims, dim=0) - sims[0]


def similarity_loss(fused: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of the two pairwise cosine matrices."""
    if fused.shape[0] != base.shape[0]:
        raise UserError("fused and base batches must have the same row count")
    _check_nonzero_rows(fused, "fused batch")
    _check_nonzero_rows(base, "base batch")
    return (cosine_matrix(fused) - cosine_matrix(base)).abs().mean()


def _batch_row_indices(
    batches: list[TrainingBatch], row_of: dict[int, int], bundles
) -> list[np.ndarray]:
    missing_base = set()
    missing_feat = set()
    out = []
    for batch in batches:
        for pid in batch.poi_ids:
            if pid not in row_of:
                missing_base.add(pid)
            if pid not in bundles:
                missing_feat.add(pid)
        out.append(np.array([row_of.get(pid, 0) for pid in batch.poi_ids], dtype=np.int64))
    if missing_base or missing_feat:
        raise UserError(
            f"batches reference POIs without base embeddings ({sorted(missing_base)[:5]}) "
            f"or feature bundles ({sorted(missing_feat)[:5]})"
        )
    return out


def train_enhancer(
    model: EnhancerNet,
    batches: list[TrainingBatch],
    bundles,
    base: EmbeddingMatrix,
    config: TrainConfig,
    out_dir=None,
    template_version: str = "",
) -> list[EpochStats]:
    """Optimize the network over the given batches; returns per-epoch stats.

    When ``out_dir`` is set, writes ``train_log.jsonl`` plus
    ``checkpoint_last.pt`` (every epoch) and ``checkpoint_best.pt`` (lowest
    mean total loss so far). A non-finite loss aborts immediately, dumping the
    offending batch ids so the input can be inspected.
    """
    from .features import bundles_to_arrays

    config.validate()
    if not batches:
        raise UserError("no training batches supplied")
    torch.manual_seed(config.seed)

    row_of = {pid: i for i, pid in enumerate(base.poi_ids)}
    index_arrays = _batch_row_indices(batches, row_of, bundles)
    e_v, e_a, e_s = bundles_to_arrays(bundles, base.poi_ids)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    feats = tuple(
        torch.as_tensor(arr, dtype=dtype, device=device) for arr in (e_v, e_a, e_s)
    )
    base_t = torch.as_tensor(base.matrix, dtype=dtype, device=device)

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = (out_path / "train_log.jsonl").open("a", encoding="utf-8")

    history: list[EpochStats] = []
    best = float("inf")
    try:
        for epoch in range(config.epochs):
            model.train()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(batches))
            start = time.monotonic()
            sum_contrast = 0.0
            sum_sim = 0.0
            for step, batch_idx in enumerate(order):
                rows = torch.as_tensor(index_arrays[batch_idx], device=device)
                fused = model(
                    feats[0][rows], feats[1][rows], feats[2][rows], base_t[rows]
                )
                l_con = infonce_loss(fused, config.temperature)
                l_sim = similarity_loss(fused, base_t[rows])
                loss = l_con + l_sim
                if not torch.isfinite(loss):
                    ids = batches[batch_idx].poi_ids
                    if out_path is not None:
                        (out_path / "nonfinite_batch.json").write_text(
                            json.dumps(
                                {"epoch": epoch, "step": step, "poi_ids": list(ids)}
                            )
                        )
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch} step {step}, "
                        f"batch anchor {ids[0]}"
                    )
                optimizer.zero_grad()
                loss.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                sum_contrast += float(l_con.detach())
                sum_sim += float(l_sim.detach())
            n = len(batches)
            stats = EpochStats(
                epoch=epoch,
                loss=(sum_contrast + sum_sim) / n,
                contrast=sum_contrast / n,
                similarity=sum_sim / n,
                seconds=time.monotonic() - start,
                batches=n,
            )
            history.append(stats)
            logger.info(
                "epoch %d: loss %.4f (contrast %.4f, sim %.4f)",
                epoch,
                stats.loss,
                stats.contrast,
                stats.similarity,
            )
            if log_fh is not None:
                log_fh.write(json.dumps(asdict(stats)) + "\n")
                log_fh.flush()
            if out_path is not None:
                extra = {"epoch": epoch, "loss": stats.loss}
                save_checkpoint(
                    model,
                    out_path / "checkpoint_last.pt",
                    template_version=template_version,
                    backend_id=base.meta.get("backend_id", ""),
                    extra=extra,
                )
                if stats.loss < best:
                    save_checkpoint(
                        model,
                        out_path / "checkpoint_best.pt",
                        template_version=template_version,
                        backend_id=base.meta.get("backend_id", ""),
                        extra=extra,
                    )
            best = min(best, stats.loss)
    finally:
        if log_fh is not None:
            log_fh.close()
    return history
