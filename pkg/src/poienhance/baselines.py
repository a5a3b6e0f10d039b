"""Base POI embeddings: text interchange format and a reference trainer.

The interchange format is the classic word-vector text layout: a header line
``N d`` followed by one line per POI, ``poi_id v1 ... vd``, floats printed
with %.9g. Any upstream model can hand its vectors to the enhancer through
this format; a small skip-gram trainer over check-in sequences is bundled so
the pipeline can run end to end without an external embedding model.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .corpus import Dataset
from .errors import DataFormatError, UserError
from .model import EmbeddingMatrix

logger = logging.getLogger(__name__)


def save_embeddings(emb: EmbeddingMatrix, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = emb.matrix.shape
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{n} {d}\n")
        for pid, row in zip(emb.poi_ids, emb.matrix):
            fh.write(str(pid) + " " + " ".join("%.9g" % v for v in row) + "\n")


def load_embeddings(path, role: str = "base") -> EmbeddingMatrix:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataFormatError(f"{path}: embedding header must be 'N d'")
        try:
            n, d = int(header[0]), int(header[1])
        except ValueError:
            raise DataFormatError(f"{path}: embedding header must be 'N d'") from None
        ids: list[int] = []
        rows = np.empty((n, d), dtype=np.float32)
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != d + 1:
                raise DataFormatError(
                    f"{path}: row {i + 1} has {len(parts)} fields, expected {d + 1}"
                )
            ids.append(int(parts[0]))
            rows[i] = [float(x) for x in parts[1:]]
        if fh.readline().strip():
            raise DataFormatError(f"{path}: more rows than the header declares")
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate poi ids")
    if not np.isfinite(rows).all():
        raise DataFormatError(f"{path}: non-finite embedding values")
    return EmbeddingMatrix(poi_ids=ids, matrix=rows, role=role, meta={"path": str(path)})


def align_to_dataset(
    emb: EmbeddingMatrix, dataset: Dataset, allow_missing: bool = False
) -> EmbeddingMatrix:
    """Reorder rows to the dataset's sorted poi ids.

    POIs without a vector are fatal unless ``allow_missing``, in which case
    they are dropped from the result (downstream tasks then skip them).
    Vectors for ids outside the dataset are ignored.
    """
    have = {pid: i for i, pid in enumerate(emb.poi_ids)}
    wanted = dataset.poi_ids()
    missing = [pid for pid in wanted if pid not in have]
    extra = len(have) - (len(wanted) - len(missing))
    if extra:
        logger.warning("ignoring %d embedding rows for ids outside the dataset", extra)
    if missing and not allow_missing:
        raise UserError(
            f"{len(missing)} POIs lack base embeddings, e.g. {missing[:5]}; "
            "pass allow_missing to drop them"
        )
    if missing:
        logger.warning("dropping %d POIs without base embeddings", len(missing))
    keep = [pid for pid in wanted if pid in have]
    matrix = emb.matrix[[have[pid] for pid in keep]]
    return EmbeddingMatrix(poi_ids=keep, matrix=matrix, role=emb.role, meta=dict(emb.meta))


def train_skipgram_reference(
    dataset: Dataset,
    dim: int = 128,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
) -> EmbeddingMatrix:
    """Skip-gram with negative sampling over check-in sequences.

    Treats each sequence as a sentence of poi-id tokens. Dynamic window and
    unigram^0.75 negative table as in word2vec; the input vectors are the
    embeddings. POIs never visited in the given split keep their random
    initialization. Deterministic for a fixed seed.
    """
    if dim < 1 or window < 1 or negatives < 1 or epochs < 1 or lr <= 0:
        raise UserError("skip-gram hyperparameters must be positive")
    ids = dataset.poi_ids()
    index = {pid: i for i, pid in enumerate(ids)}
    n = len(ids)
    rng = np.random.default_rng(seed)
    vin = (rng.random((n, dim), dtype=np.float64) - 0.5) / dim
    vout = np.zeros((n, dim), dtype=np.float64)

    counts = np.zeros(n, dtype=np.float64)
    sentences = []
    for seq in dataset.sequences:
        tokens = [index[r.poi_id] for r in seq.records]
        sentences.append(tokens)
        for t in tokens:
            counts[t] += 1.0
    if not sentences:
        raise UserError("no sequences to train base embeddings on")
    unseen = int((counts == 0).sum())
    if unseen:
        logger.warning(
            "%d POIs never appear in the training sequences; "
            "their rows stay at random initialization",
            unseen,
        )
    noise = counts**0.75
    total_noise = noise.sum()
    if total_noise <= 0:
        raise UserError("empty check-in corpus")
    noise_p = noise / total_noise

    total_steps = max(1, epochs * sum(len(s) for s in sentences))
    step = 0
    epoch_loss: list[float] = []
    for _epoch in range(epochs):
        loss_sum = 0.0
        loss_terms = 0
        for tokens in sentences:
            for i, center in enumerate(tokens):
                step += 1
                cur_lr = lr * max(1e-4, 1.0 - step / total_steps)
                span = int(rng.integers(1, window + 1))
                lo = max(0, i - span)
                hi = min(len(tokens), i + span + 1)
                for j in range(lo, hi):
                    if j == i:
                        continue
                    context = tokens[j]
                    neg = rng.choice(n, size=negatives, p=noise_p)
                    targets = np.concatenate(([context], neg))
                    labels = np.zeros(len(targets))
                    labels[0] = 1.0
                    vecs = vout[targets]  # (k, dim)
                    scores = 1.0 / (1.0 + np.exp(-vecs @ vin[center]))
                    eps = 1e-10
                    loss_sum += -np.log(scores[0] + eps) - np.log(
                        1.0 - scores[1:] + eps
                    ).sum()
                    loss_terms += 1
                    grads = (scores - labels)[:, None] * cur_lr
                    grad_center = (grads * vecs).sum(axis=0)
                    vout[targets] -= grads * vin[center]
                    vin[center] -= grad_center
        epoch_loss.append(loss_sum / max(1, loss_terms))
    return EmbeddingMatrix(
        poi_ids=ids,
        matrix=vin.astype(np.float32),
        role="base",
        meta={
            "provider": "skipgram",
            "dim": dim,
            "window": window,
            "negatives": negatives,
            "epochs": epochs,
            "seed": seed,
            "unseen_pois": unseen,
            "epoch_loss": epoch_loss,
        },
    )
