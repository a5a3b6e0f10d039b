"""The neural enhancement core.

Pipeline: project the three language-model feature matrices into the base
embedding space, align the visit-pattern and surrounding features against the
address feature with two stacked cross-attention encoders, collapse the two
aligned streams into one semantic matrix via score-weighted fusion, then
inject that matrix into the base POI embeddings through a multi-query
cross-attention stack.

Attention here mixes across the batch of POIs: each POI is one row, and the
query/key interaction relates different POIs to each other. One vector per
POI means a within-POI reading would degenerate (softmax over a single key),
so batch composition is part of the inference contract -- fixed-order chunks
make results reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import UserError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"POIENHK1"


@dataclass
class HyperParams:
    """Shape of the enhancement network.

    ``scale_by_head_dim`` switches the attention logit scale from the default
    1/sqrt(dim) to the conventional 1/sqrt(head_dim). ``parallel_fuse``
    switches the injection stack from sequential add-norm layers to the
    parallel attention + feed-forward arrangement.
    """

    dim: int = 256  # shared hidden size d
    latent_dim: int = 256  # fusion scorer latent width
    heads: int = 8
    head_dim: int = 32
    align_layers: int = 4
    fuse_layers: int = 2
    feature_dim: int = 4096  # backend hidden size D
    ffn_mult: int = 4
    parallel_fuse: bool = False
    scale_by_head_dim: bool = False

    def validate(self) -> None:
        for name in ("dim", "latent_dim", "heads", "head_dim", "feature_dim", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise UserError(f"hyperparameter {name} must be positive")
        if self.align_layers < 1 or self.fuse_layers < 1:
            raise UserError("align_layers and fuse_layers must be >= 1")


@dataclass
class EmbeddingMatrix:
    """A matrix of per-POI vectors plus the id ordering of its rows."""

    poi_ids: list[int]
    matrix: np.ndarray
    role: str = "fused"  # base | fused | semantic | aligned
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.poi_ids):
            raise ValueError("matrix rows must match poi_ids")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding matrix contains non-finite entries")

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def row(self, poi_id: int) -> np.ndarray:
        try:
            return self.matrix[self.poi_ids.index(poi_id)]
        except ValueError:
            raise KeyError(f"poi id {poi_id} not in embedding matrix") from None


class CrossAttention(nn.Module):
    """Multi-head cross attention over batch rows, without biases.

    With ``shared_kv=True`` all query heads read one shared key/value
    projection (multi-query attention); otherwise each head owns its own.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        head_dim: int,
        shared_kv: bool = False,
        scale_by_head_dim: bool = False,
        name: str = "attn",
    ):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.shared_kv = shared_kv
        self.name = name
        kv_width = head_dim if shared_kv else heads * head_dim
        self.q_proj = nn.Linear(dim, heads * head_dim, bias=False)
        self.k_proj = nn.Linear(dim, kv_width, bias=False)
        self.v_proj = nn.Linear(dim, kv_width, bias=False)
        self.out_proj = nn.Linear(heads * head_dim, dim, bias=False)
        self.scale = 1.0 / math.sqrt(head_dim if scale_by_head_dim else dim)

    def forward(self, q_src: torch.Tensor, kv_src: torch.Tensor) -> torch.Tensor:
        n = q_src.shape[0]
        q = self.q_proj(q_src).reshape(n, self.heads, self.head_dim).transpose(0, 1)
        if self.shared_kv:
            k = self.k_proj(kv_src).unsqueeze(0)  # broadcast over heads
            v = self.v_proj(kv_src).unsqueeze(0)
        else:
            m = kv_src.shape[0]
            k = self.k_proj(kv_src).reshape(m, self.heads, self.head_dim).transpose(0, 1)
            v = self.v_proj(kv_src).reshape(m, self.heads, self.head_dim).transpose(0, 1)
        scores = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        if not torch.isfinite(scores).all():
            raise FloatingPointError(f"non-finite attention scores in {self.name}")
        attn = torch.softmax(scores, dim=-1)
        out = torch.matmul(attn, v)  # (heads, n, head_dim)
        concat = out.transpose(0, 1).reshape(n, self.heads * self.head_dim)
        return self.out_proj(concat)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, mult * dim)
        self.fc2 = nn.Linear(mult * dim, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """One cross-attention encoder layer with residuals and layer norms.

    Sequential form: ``z = LN(residual + attn(q, kv)); out = LN(z + ffn(z))``.
    Parallel form (used by the injection stack when configured): the
    attention and feed-forward branches both read a normalized copy of the
    layer input and are summed onto it; each branch uses its own norm
    parameters so the two arrangements share a checkpoint layout.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        head_dim: int,
        ffn_mult: int,
        shared_kv: bool = False,
        scale_by_head_dim: bool = False,
        name: str = "layer",
    ):
        super().__init__()
        self.attn = CrossAttention(
            dim, heads, head_dim, shared_kv, scale_by_head_dim, name=name
        )
        self.ffn = FeedForward(dim, ffn_mult)
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(self, q_src, kv_src, residual):
        z = self.norm_attn(residual + self.attn(q_src, kv_src))
        return self.norm_ffn(z + self.ffn(z))

    def forward_parallel(self, q_src, x_in):
        return (
            x_in
            + self.attn(q_src, self.norm_attn(x_in))
            + self.ffn(self.norm_ffn(x_in))
        )


class ScoreWeightedFusion(nn.Module):
    """Collapse the two aligned streams into one matrix by learned weights.

    Each row gets two scores from a shared projection, a LeakyReLU, and a
    scoring map applied to the concatenation in both orders; a softmax over
    the pair yields convex combination weights.
    """

    def __init__(self, dim: int, latent_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, latent_dim, bias=False)
        self.score = nn.Linear(2 * latent_dim, 1, bias=False)
        self.act = nn.LeakyReLU(0.01)

    def forward(self, e_av: torch.Tensor, e_as: torch.Tensor):
        a = self.proj(e_av)
        b = self.proj(e_as)
        score_av = self.score(self.act(torch.cat([a, b], dim=1)))
        score_as = self.score(self.act(torch.cat([b, a], dim=1)))
        weights = torch.softmax(torch.cat([score_av, score_as], dim=1), dim=1)
        fused = weights[:, 0:1] * e_av + weights[:, 1:2] * e_as
        return fused, weights


class EnhancerNet(nn.Module):
    """All learnable parameters of the enhancement pipeline."""

    def __init__(self, hp: HyperParams, seed: int = 0):
        super().__init__()
        hp.validate()
        self.hp = hp
        self.proj_visit = nn.Linear(hp.feature_dim, hp.dim, bias=False)
        self.proj_address = nn.Linear(hp.feature_dim, hp.dim, bias=False)
        self.proj_surrounding = nn.Linear(hp.feature_dim, hp.dim, bias=False)

        def layer(shared_kv, name):
            return EncoderLayer(
                hp.dim,
                hp.heads,
                hp.head_dim,
                hp.ffn_mult,
                shared_kv=shared_kv,
                scale_by_head_dim=hp.scale_by_head_dim,
                name=name,
            )

        self.align_visit = nn.ModuleList(
            layer(False, f"align_visit[{i}]") for i in range(hp.align_layers)
        )
        self.align_surround = nn.ModuleList(
            layer(False, f"align_surround[{i}]") for i in range(hp.align_layers)
        )
        self.fusion = ScoreWeightedFusion(hp.dim, hp.latent_dim)
        self.inject = nn.ModuleList(
            layer(True, f"inject[{i}]") for i in range(hp.fuse_layers)
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Scaled-uniform fan-in init for linear maps, ones/zeros for norms."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    bound = 1.0 / math.sqrt(module.weight.shape[1])
                    module.weight.uniform_(-bound, bound, generator=gen)
                    if module.bias is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def project(self, e_visit, e_address, e_surrounding):
        if e_visit.shape[1] != self.hp.feature_dim:
            raise UserError(
                f"feature dim {e_visit.shape[1]} != model feature_dim {self.hp.feature_dim}"
            )
        return (
            self.proj_visit(e_visit),
            self.proj_address(e_address),
            self.proj_surrounding(e_surrounding),
        )

    @staticmethod
    def run_alignment(layers, other, address):
        """First layer queries with the non-address stream against the
        address; later layers query with the address against the evolving
        stream, with the residual riding on that stream."""
        z = layers[0](q_src=other, kv_src=address, residual=address)
        for lyr in layers[1:]:
            z = lyr(q_src=address, kv_src=z, residual=z)
        return z

    def run_injection(self, e_llm, e_poi):
        x = e_poi
        for lyr in self.inject:
            if self.hp.parallel_fuse:
                x = lyr.forward_parallel(e_llm, x)
            else:
                x = lyr(q_src=e_llm, kv_src=x, residual=x)
        return x

    def forward(self, e_visit, e_address, e_surrounding, e_poi, return_parts=False):
        tv, ta, ts = self.project(e_visit, e_address, e_surrounding)
        e_av = self.run_alignment(self.align_visit, tv, ta)
        e_as = self.run_alignment(self.align_surround, ts, ta)
        e_llm, weights = self.fusion(e_av, e_as)
        fused = self.run_injection(e_llm, e_poi)
        if return_parts:
            return fused, {
                "aligned_visit": e_av,
                "aligned_surrounding": e_as,
                "semantic": e_llm,
                "fusion_weights": weights,
            }
        return fused


def enhance(
    model: EnhancerNet,
    bundles,
    base: EmbeddingMatrix,
    chunk_size: int = 1024,
    on_missing: str = "fatal",
) -> EmbeddingMatrix:
    """Run the full pipeline over a corpus in fixed-order chunks.

    ``bundles`` maps poi id -> FeatureBundle. Attention mixes across the rows
    of a chunk, so ``chunk_size`` is part of the inference contract and is
    recorded in the output metadata. POIs lacking a base embedding row or a
    feature bundle are fatal by default; ``on_missing="skip"`` drops them and
    reports how many were skipped.
    """
    from .features import bundles_to_arrays

    if chunk_size < 1:
        raise UserError("chunk_size must be >= 1")
    if on_missing not in ("fatal", "skip"):
        raise UserError(f"on_missing must be 'fatal' or 'skip', got {on_missing!r}")
    ids = [pid for pid in base.poi_ids]
    missing = [pid for pid in ids if pid not in bundles]
    if missing:
        if on_missing == "fatal":
            raise UserError(
                f"{len(missing)} POIs lack feature bundles, e.g. {missing[:5]}"
            )
        logger.warning("skipping %d POIs without feature bundles", len(missing))
        keep = [i for i, pid in enumerate(ids) if pid not in set(missing)]
        ids = [ids[i] for i in keep]
        base_matrix = base.matrix[keep]
    else:
        base_matrix = base.matrix

    e_v, e_a, e_s = bundles_to_arrays(bundles, ids)
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    model.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(ids), chunk_size):
            sl = slice(start, start + chunk_size)
            fused = model(
                torch.as_tensor(e_v[sl], dtype=dtype, device=device),
                torch.as_tensor(e_a[sl], dtype=dtype, device=device),
                torch.as_tensor(e_s[sl], dtype=dtype, device=device),
                torch.as_tensor(base_matrix[sl], dtype=dtype, device=device),
            )
            rows.append(fused.cpu().to(torch.float32).numpy())
    matrix = np.concatenate(rows, axis=0) if rows else np.zeros((0, model.hp.dim), np.float32)
    return EmbeddingMatrix(
        poi_ids=ids,
        matrix=matrix,
        role="fused",
        meta={"chunk_size": chunk_size, "skipped": len(missing)},
    )


# ---------------------------------------------------------------------------
# Checkpoint format: magic, little-endian JSON header length, JSON header
# (hyperparameters, provenance, tensor manifest), then the named float32
# tensors in manifest order.
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: EnhancerNet,
    path,
    template_version: str = "",
    backend_id: str = "",
    chunk_size: int = 0,
    extra: dict | None = None,
) -> None:
    state = model.state_dict()
    manifest = [
        {"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()
    ]
    header = {
        "hyperparams": asdict(model.hp),
        "template_version": template_version,
        "backend_id": backend_id,
        "chunk_size": chunk_size,
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in state:
            fh.write(
                np.ascontiguousarray(
                    state[name].detach().cpu().numpy(), dtype="<f4"
                ).tobytes()
            )
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[EnhancerNet, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise UserError(f"{path}: not an enhancer checkpoint")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    model = EnhancerNet(HyperParams(**header["hyperparams"]))
    offset = 16 + header_len
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).copy()
        offset += 4 * count
        state[entry["name"]] = torch.from_numpy(values.reshape(entry["shape"]))
    model.load_state_dict(state)
    return model, header
