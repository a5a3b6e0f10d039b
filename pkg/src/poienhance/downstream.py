"""Downstream evaluation of embedding quality.

Four tasks consume a frozen EmbeddingMatrix: next-POI recommendation and
user identification (recurrent sequence models over embedded check-ins),
visitor-flow prediction (an encoder-decoder over hourly count series with the
POI embedding and an hour-of-day encoding appended to every input step), and
category clustering (k-means + NMI). A pairwise Euclidean distance helper
supports case-study comparisons. The embeddings are inputs, never trained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.metrics import f1_score, normalized_mutual_info_score
from torch import nn

from .corpus import CheckinSequence, Dataset
from .errors import UserError
from .model import EmbeddingMatrix

logger = logging.getLogger(__name__)


@dataclass
class TaskConfig:
    lstm_hidden: int = 512
    lstm_layers: int = 2
    epochs: int = 100
    lr: float = 1e-3  # recommendation default; other tasks pass 1e-4
    max_slice: int = 128
    flow_window_hours: int = 1
    min_flow_len: int = 6  # shortest kept run of non-zero hourly counts
    flow_horizon: int = 3  # decoder steps predicted by the flow model
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        for name in (
            "lstm_hidden",
            "lstm_layers",
            "epochs",
            "max_slice",
            "flow_window_hours",
            "min_flow_len",
            "flow_horizon",
            "batch_size",
        ):
            if getattr(self, name) < 1:
                raise UserError(f"task config field {name} must be >= 1")
        if self.max_slice < 2:
            raise UserError("max_slice must be >= 2")
        if self.lr <= 0:
            raise UserError("lr must be positive")


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    provenance: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def slice_sequences(
    sequences: list[CheckinSequence], max_slice: int = 128
) -> list[CheckinSequence]:
    """Cut long sequences into consecutive slices of at most ``max_slice``
    records; slices shorter than 2 are dropped."""
    if max_slice < 2:
        raise UserError("max_slice must be >= 2")
    out = []
    for seq in sequences:
        for start in range(0, len(seq.records), max_slice):
            chunk = seq.records[start : start + max_slice]
            if len(chunk) >= 2:
                out.append(CheckinSequence(user=seq.user, records=chunk))
    return out


def hit_at_k(ranked: list[int], truth: int, k: int) -> int:
    if k < 1:
        raise UserError("k must be >= 1")
    if len(ranked) < k:
        raise UserError(f"ranked list has {len(ranked)} entries, need >= {k}")
    return 1 if truth in ranked[:k] else 0


def _check_coverage(emb: EmbeddingMatrix, datasets: list[Dataset]) -> dict[int, int]:
    row_of = {pid: i for i, pid in enumerate(emb.poi_ids)}
    missing = set()
    for ds in datasets:
        for seq in ds.sequences:
            for rec in seq.records:
                if rec.poi_id not in row_of:
                    missing.add(rec.poi_id)
    if missing:
        raise UserError(
            f"embeddings missing for {len(missing)} POIs, e.g. {sorted(missing)[:5]}"
        )
    return row_of


class _SequenceModel(nn.Module):
    """Frozen embedding lookup, a multi-layer LSTM, one dense head."""

    def __init__(self, matrix: np.ndarray, hidden: int, layers: int, n_out: int):
        super().__init__()
        table = torch.as_tensor(matrix, dtype=torch.float32).clone()
        self.register_buffer("table", table)  # buffer, never optimized
        self.lstm = nn.LSTM(
            table.shape[1], hidden, num_layers=layers, batch_first=True
        )
        self.head = nn.Linear(hidden, n_out)

    def forward(self, rows: torch.Tensor, lengths: torch.Tensor):
        x = self.table[rows]  # (b, t, d)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, (h_n, _) = self.lstm(packed)
        padded, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True)
        return self.head(padded), self.head(h_n[-1])


def _pad_batch(slices, row_of):
    rows = [torch.tensor([row_of[r.poi_id] for r in s.records]) for s in slices]
    lengths = torch.tensor([len(r) for r in rows])
    return nn.utils.rnn.pad_sequence(rows, batch_first=True), lengths


def eval_recommendation(
    emb: EmbeddingMatrix,
    train: Dataset,
    test: Dataset,
    config: TaskConfig | None = None,
) -> MetricReport:
    """Next-POI prediction: every position of a slice is one prediction event
    (given the prefix, rank the next check-in's POI over all POIs)."""
    config = config or TaskConfig()
    config.validate()
    row_of = _check_coverage(emb, [train, test])
    train_slices = slice_sequences(train.sequences, config.max_slice)
    test_slices = slice_sequences(test.sequences, config.max_slice)
    if not train_slices or not test_slices:
        raise UserError("recommendation needs non-empty train and test slices")

    torch.manual_seed(config.seed)
    n_pois = len(emb.poi_ids)
    model = _SequenceModel(emb.matrix, config.lstm_hidden, config.lstm_layers, n_pois)
    optim = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=config.lr
    )
    ce = nn.CrossEntropyLoss(ignore_index=-100)
    rng = np.random.default_rng(config.seed)

    model.train()
    for _epoch in range(config.epochs):
        order = rng.permutation(len(train_slices))
        for start in range(0, len(order), config.batch_size):
            batch = [train_slices[i] for i in order[start : start + config.batch_size]]
            rows, lengths = _pad_batch(batch, row_of)
            logits, _ = model(rows[:, :-1], lengths - 1)
            targets = torch.full(logits.shape[:2], -100, dtype=torch.long)
            for b, s in enumerate(batch):
                ids = [row_of[r.poi_id] for r in s.records[1:]]
                targets[b, : len(ids)] = torch.tensor(ids)
            loss = ce(logits.reshape(-1, n_pois), targets.reshape(-1))
            optim.zero_grad()
            loss.backward()
            optim.step()

    model.eval()
    hits1 = hits5 = total = 0
    with torch.no_grad():
        for start in range(0, len(test_slices), config.batch_size):
            batch = test_slices[start : start + config.batch_size]
            rows, lengths = _pad_batch(batch, row_of)
            logits, _ = model(rows[:, :-1], lengths - 1)
            top5 = torch.topk(logits, k=min(5, n_pois), dim=-1).indices
            for b, s in enumerate(batch):
                for t, rec in enumerate(s.records[1:]):
                    ranked = [emb.poi_ids[i] for i in top5[b, t].tolist()]
                    hits1 += hit_at_k(ranked, rec.poi_id, 1)
                    hits5 += hit_at_k(ranked, rec.poi_id, min(5, n_pois))
                    total += 1
    return MetricReport(
        task="poi_recommendation",
        metrics={"hit@1": hits1 / total, "hit@5": hits5 / total},
        provenance={"role": emb.role, **emb.meta},
        extras={"predictions": total, "train_slices": len(train_slices)},
    )


def eval_classification(
    emb: EmbeddingMatrix,
    train: Dataset,
    test: Dataset,
    config: TaskConfig | None = None,
) -> MetricReport:
    """User identification from a check-in slice; label space comes from the
    train split, test slices of unseen users are excluded and counted."""
    config = config or TaskConfig(lr=1e-4)
    config.validate()
    row_of = _check_coverage(emb, [train, test])
    train_slices = slice_sequences(train.sequences, config.max_slice)
    users = sorted({s.user for s in train_slices})
    if not users:
        raise UserError("classification needs at least one training user")
    user_idx = {u: i for i, u in enumerate(users)}
    test_all = slice_sequences(test.sequences, config.max_slice)
    test_slices = [s for s in test_all if s.user in user_idx]
    skipped = len(test_all) - len(test_slices)
    if not test_slices:
        raise UserError("no test slices with users seen during training")

    torch.manual_seed(config.seed)
    model = _SequenceModel(
        emb.matrix, config.lstm_hidden, config.lstm_layers, len(users)
    )
    optim = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=config.lr
    )
    ce = nn.CrossEntropyLoss()
    rng = np.random.default_rng(config.seed)

    model.train()
    for _epoch in range(config.epochs):
        order = rng.permutation(len(train_slices))
        for start in range(0, len(order), config.batch_size):
            batch = [train_slices[i] for i in order[start : start + config.batch_size]]
            rows, lengths = _pad_batch(batch, row_of)
            _, logits = model(rows, lengths)
            targets = torch.tensor([user_idx[s.user] for s in batch])
            loss = ce(logits, targets)
            optim.zero_grad()
            loss.backward()
            optim.step()

    model.eval()
    y_true, y_pred = [], []
    with torch.no_grad():
        for start in range(0, len(test_slices), config.batch_size):
            batch = test_slices[start : start + config.batch_size]
            rows, lengths = _pad_batch(batch, row_of)
            _, logits = model(rows, lengths)
            y_pred.extend(logits.argmax(dim=1).tolist())
            y_true.extend(user_idx[s.user] for s in batch)
    acc = float(np.mean(np.array(y_true) == np.array(y_pred)))
    macro = float(
        f1_score(
            y_true, y_pred, labels=list(range(len(users))), average="macro",
            zero_division=0,
        )
    )
    return MetricReport(
        task="checkin_classification",
        metrics={"acc": acc, "macro_f1": macro},
        provenance={"role": emb.role, **emb.meta},
        extras={"users": len(users), "skipped_unseen_user_slices": skipped},
    )


@dataclass(frozen=True)
class FlowSeries:
    poi_id: int
    start_hour: int  # hour of day (local) at the first window
    values: tuple[float, ...]  # z-scored hourly counts
    mean: float
    std: float


def build_flow_series(
    dataset: Dataset, config: TaskConfig | None = None
) -> list[FlowSeries]:
    """Hourly visit counts per POI, cut into maximal non-zero runs.

    Runs shorter than ``min_flow_len`` are discarded. Each kept run is
    z-scored using the mean/std of its history portion (all but the last
    ``flow_horizon`` points) so the forecast targets never leak into the
    normalization; zero-variance histories drop the series, counted in a log.
    Bucketing uses local time, so the recorded start hour is a local
    hour of day.
    """
    config = config or TaskConfig()
    config.validate()
    epoch = datetime(1970, 1, 1)
    buckets: dict[int, dict[int, int]] = {}
    for seq in dataset.sequences:
        for rec in seq.records:
            local = rec.local_datetime().replace(tzinfo=None)
            hour_index = int((local - epoch).total_seconds() // 3600)
            hour_index //= config.flow_window_hours
            per_poi = buckets.setdefault(rec.poi_id, {})
            per_poi[hour_index] = per_poi.get(hour_index, 0) + 1
    series: list[FlowSeries] = []
    dropped_std = 0
    for pid in sorted(buckets):
        hours = buckets[pid]
        for run_start, counts in _nonzero_runs(hours):
            if len(counts) < config.min_flow_len:
                continue
            if len(counts) <= config.flow_horizon:
                continue
            history = np.array(counts[: -config.flow_horizon], dtype=np.float64)
            mean = float(history.mean())
            std = float(history.std())
            if std == 0.0:
                dropped_std += 1
                continue
            values = tuple((np.array(counts, dtype=np.float64) - mean) / std)
            start_hour = int((run_start * config.flow_window_hours) % 24)
            series.append(
                FlowSeries(
                    poi_id=pid, start_hour=start_hour, values=values, mean=mean, std=std
                )
            )
    if dropped_std:
        logger.info("dropped %d zero-variance flow series", dropped_std)
    return series


def _nonzero_runs(hours: dict[int, int]):
    """Yield (start_hour_index, counts) for each maximal run of non-zero
    hourly counts."""
    if not hours:
        return
    keys = sorted(hours)
    run_start = keys[0]
    counts = [hours[keys[0]]]
    for prev, cur in zip(keys, keys[1:]):
        if cur == prev + 1:
            counts.append(hours[cur])
        else:
            yield run_start, counts
            run_start = cur
            counts = [hours[cur]]
    yield run_start, counts


class _FlowModel(nn.Module):
    """Encoder-decoder over scalar series with static context features."""

    def __init__(self, context_dim: int, hidden: int, layers: int):
        super().__init__()
        self.encoder = nn.LSTM(1 + context_dim, hidden, num_layers=layers, batch_first=True)
        self.decoder = nn.LSTM(1 + context_dim, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, history, context, horizon, teacher=None):
        # history (b, t, 1); context (b, context_dim) appended to every step
        b, t, _ = history.shape
        ctx = context.unsqueeze(1)
        enc_in = torch.cat([history, ctx.expand(b, t, -1)], dim=2)
        _, state = self.encoder(enc_in)
        prev = history[:, -1:, :]
        outs = []
        for step in range(horizon):
            dec_in = torch.cat([prev, ctx], dim=2)
            out, state = self.decoder(dec_in, state)
            pred = self.head(out)
            outs.append(pred)
            if teacher is not None:
                prev = teacher[:, step : step + 1, :]
            else:
                prev = pred
        return torch.cat(outs, dim=1)


def _hour_encoding(hour: int) -> np.ndarray:
    onehot = np.zeros(24, dtype=np.float32)
    onehot[hour % 24] = 1.0
    return onehot


def eval_flow(
    emb: EmbeddingMatrix,
    series: list[FlowSeries],
    config: TaskConfig | None = None,
) -> MetricReport:
    """Forecast the last ``flow_horizon`` points of held-out series.

    Series are shuffled with the seed and split 2:1:7 (test/val/train) like
    the sequence split; metrics are in normalized units. The naive floor of
    predicting each series' history mean (zero, in normalized units) is
    reported alongside.
    """
    config = config or TaskConfig(lr=1e-4)
    config.validate()
    if len(series) < 10:
        raise UserError(f"flow evaluation needs >= 10 series, got {len(series)}")
    row_of = {pid: i for i, pid in enumerate(emb.poi_ids)}
    missing = sorted({s.poi_id for s in series if s.poi_id not in row_of})
    if missing:
        raise UserError(f"embeddings missing for flow POIs, e.g. {missing[:5]}")

    from .corpus import largest_remainder_counts

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(series))
    n_test, n_val, n_train = largest_remainder_counts(len(series), (2, 1, 7))
    test_idx = order[:n_test]
    train_idx = order[n_test + n_val :]
    if len(test_idx) == 0 or len(train_idx) == 0:
        raise UserError("flow split produced an empty train or test set")

    matrix = emb.matrix
    contexts = {}
    for s in series:
        contexts[id(s)] = np.concatenate(
            [matrix[row_of[s.poi_id]], _hour_encoding(s.start_hour)]
        ).astype(np.float32)
    context_dim = matrix.shape[1] + 24

    torch.manual_seed(config.seed)
    model = _FlowModel(context_dim, config.lstm_hidden, config.lstm_layers)
    optim = torch.optim.Adam(model.parameters(), lr=config.lr)
    mse = nn.MSELoss()
    horizon = config.flow_horizon

    def tensors_for(s: FlowSeries):
        vals = torch.tensor(s.values, dtype=torch.float32)
        hist = vals[:-horizon].reshape(1, -1, 1)
        target = vals[-horizon:].reshape(1, -1, 1)
        ctx = torch.tensor(contexts[id(s)]).reshape(1, -1)
        return hist, target, ctx

    model.train()
    for _epoch in range(config.epochs):
        for i in rng.permutation(len(train_idx)):
            s = series[train_idx[i]]
            hist, target, ctx = tensors_for(s)
            pred = model(hist, ctx, horizon, teacher=target)
            loss = mse(pred, target)
            optim.zero_grad()
            loss.backward()
            optim.step()

    model.eval()
    abs_errors, sq_errors, naive_abs, naive_sq = [], [], [], []
    with torch.no_grad():
        for i in test_idx:
            s = series[i]
            hist, target, ctx = tensors_for(s)
            pred = model(hist, ctx, horizon)
            err = (pred - target).reshape(-1)
            abs_errors.extend(err.abs().tolist())
            sq_errors.extend((err**2).tolist())
            naive = target.reshape(-1)  # naive forecast is 0 in normalized units
            naive_abs.extend(naive.abs().tolist())
            naive_sq.extend((naive**2).tolist())
    mae = float(np.mean(abs_errors))
    rmse = float(np.sqrt(np.mean(sq_errors)))
    return MetricReport(
        task="flow_prediction",
        metrics={"mae": mae, "rmse": rmse},
        provenance={"role": emb.role, **emb.meta},
        extras={
            "naive_mae": float(np.mean(naive_abs)),
            "naive_rmse": float(np.sqrt(np.mean(naive_sq))),
            "test_series": int(len(test_idx)),
            "train_series": int(len(train_idx)),
            "units": "normalized",
        },
    )


def eval_cluster(
    emb: EmbeddingMatrix, dataset: Dataset, seed: int = 0
) -> MetricReport:
    """k-means with k = number of categories, scored by NMI against the
    category labels."""
    k = len(dataset.category_vocab)
    if k < 2:
        raise UserError("clustering needs at least 2 categories")
    row_of = {pid: i for i, pid in enumerate(emb.poi_ids)}
    ids = [pid for pid in dataset.poi_ids() if pid in row_of]
    missing = len(dataset.pois) - len(ids)
    if missing:
        raise UserError(f"embeddings missing for {missing} POIs")
    if k > len(ids):
        raise UserError(f"k={k} categories exceeds {len(ids)} POIs")
    x = emb.matrix[[row_of[pid] for pid in ids]]
    labels = [dataset.pois[pid].category for pid in ids]
    km = KMeans(n_clusters=k, n_init=10, random_state=seed)
    assignment = km.fit_predict(x)
    nmi = float(normalized_mutual_info_score(labels, assignment))
    return MetricReport(
        task="category_clustering",
        metrics={"nmi": nmi},
        provenance={"role": emb.role, **emb.meta},
        extras={"k": k, "pois": len(ids)},
    )


def pairwise_distance(emb: EmbeddingMatrix, id_a: int, id_b: int) -> float:
    row_of = {pid: i for i, pid in enumerate(emb.poi_ids)}
    for pid in (id_a, id_b):
        if pid not in row_of:
            raise UserError(f"poi id {pid} not in embedding matrix")
    diff = emb.matrix[row_of[id_a]].astype(np.float64) - emb.matrix[row_of[id_b]].astype(
        np.float64
    )
    return float(np.sqrt((diff**2).sum()))
