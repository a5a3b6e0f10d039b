"""Multi-view positive mining and contrastive batch construction.

Three views nominate positives for an anchor POI:

* sequence-time: co-visited within a small index window of the same check-in
  sequence on the same local calendar date (training split only, so
  evaluation data never leaks into batch construction);
* geography: same category inside a small square centered on the anchor;
* functional: same category with the same weekly/daily visit pattern.

The anchor's positive set is the union of the enabled views, minus the
anchor itself; a pair nominated by several views is emitted once, tagged
with every view that produced it. Each (anchor, positive) pair becomes one
batch of ``batch_size`` rows: anchor, positive, then negatives drawn
uniformly from POIs that are neither the anchor nor any of its positives.
Negatives are drawn without replacement; when the candidate pool is smaller
than the batch needs (tiny corpora), the draw falls back to replacement with
a warning.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attributes import GridIndex, PoiAttributes, square_contains
from .corpus import CheckinSequence, Dataset, Poi
from .errors import UserError

logger = logging.getLogger(__name__)

STRATEGIES = ("seq_time", "geography", "functional")


@dataclass
class SamplerConfig:
    batch_size: int = 64  # rows per batch: anchor + positive + negatives
    seq_window: int = 2  # max index distance within a sequence
    geo_side_km: float = 0.5
    strategies: tuple[str, ...] = STRATEGIES
    seed: int = 0
    max_pairs_per_anchor: int | None = None

    def validate(self) -> None:
        if self.batch_size < 3:
            raise UserError("batch_size must be >= 3 (anchor, positive, >=1 negative)")
        if self.seq_window < 0:
            raise UserError("seq_window must be >= 0")
        if self.geo_side_km <= 0:
            raise UserError("geo_side_km must be positive")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise UserError(f"unknown sampling strategies {unknown}; known: {STRATEGIES}")
        if not self.strategies:
            raise UserError("at least one sampling strategy must be enabled")
        if self.max_pairs_per_anchor is not None and self.max_pairs_per_anchor < 1:
            raise UserError("max_pairs_per_anchor must be >= 1 when set")


@dataclass(frozen=True)
class TrainingBatch:
    """Row 0 is the anchor, row 1 its positive, the rest negatives.

    ``sources`` records which views nominated the (anchor, positive) pair.
    """

    poi_ids: tuple[int, ...]
    sources: tuple[str, ...] = ()

    @property
    def anchor_id(self) -> int:
        return self.poi_ids[0]

    @property
    def positive_id(self) -> int:
        return self.poi_ids[1]

    @property
    def negative_ids(self) -> tuple[int, ...]:
        return self.poi_ids[2:]


def sequence_time_positives(
    sequence: CheckinSequence, index: int, window: int = 2
) -> set[int]:
    """POIs of records within ``window`` positions of ``index`` that share
    its local calendar date."""
    records = sequence.records
    if not 0 <= index < len(records):
        raise UserError(f"record index {index} outside sequence of {len(records)}")
    anchor = records[index]
    out = set()
    for j in range(max(0, index - window), min(len(records), index + window + 1)):
        if j == index:
            continue
        other = records[j]
        if other.poi_id != anchor.poi_id and other.local_date() == anchor.local_date():
            out.add(other.poi_id)
    return out


def geography_positives(
    poi: Poi, dataset: Dataset, side_km: float = 0.5, grid: GridIndex | None = None
) -> set[int]:
    """Same-category POIs inside the square centered on ``poi``."""
    if grid is not None:
        near = grid.neighbors_in_square(poi)
    else:
        near = [
            other.id
            for other in dataset.pois.values()
            if other.id != poi.id and square_contains(poi, other, side_km)
        ]
    return {pid for pid in near if dataset.pois[pid].category == poi.category}


def functional_positives(
    poi: Poi, dataset: Dataset, attrs: dict[int, PoiAttributes]
) -> set[int]:
    """Same-category POIs with an identical weekly/daily visit pattern."""
    mine = attrs.get(poi.id)
    if mine is None:
        raise UserError(f"attributes missing for poi {poi.id}; derive them first")
    out = set()
    for pid, other in dataset.pois.items():
        if pid == poi.id or other.category != poi.category:
            continue
        theirs = attrs.get(pid)
        if theirs is None:
            raise UserError(f"attributes missing for poi {pid}; derive them first")
        if (
            theirs.visit_pattern.weekly == mine.visit_pattern.weekly
            and theirs.visit_pattern.daily == mine.visit_pattern.daily
        ):
            out.add(pid)
    return out


def _collect_seq_time(train_split: Dataset, window: int) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for seq in train_split.sequences:
        recs = seq.records
        for i, a in enumerate(recs):
            hi = min(i + window + 1, len(recs))
            for j in range(i + 1, hi):
                b = recs[j]
                if a.poi_id == b.poi_id or a.local_date() != b.local_date():
                    continue
                out.setdefault(a.poi_id, set()).add(b.poi_id)
                out.setdefault(b.poi_id, set()).add(a.poi_id)
    return out


def _collect_functional(
    dataset: Dataset, attrs: dict[int, PoiAttributes]
) -> dict[int, set[int]]:
    groups: dict[tuple, list[int]] = {}
    for pid, poi in dataset.pois.items():
        attr = attrs.get(pid)
        if attr is None:
            raise UserError(f"attributes missing for poi {pid}; derive them first")
        key = (poi.category, attr.visit_pattern.weekly, attr.visit_pattern.daily)
        groups.setdefault(key, []).append(pid)
    out: dict[int, set[int]] = {}
    for members in groups.values():
        if len(members) < 2:
            continue
        member_set = set(members)
        for pid in members:
            out[pid] = member_set - {pid}
    return out


def positive_sets(
    dataset: Dataset,
    train_split: Dataset,
    attrs: dict[int, PoiAttributes],
    config: SamplerConfig,
    grid: GridIndex | None = None,
) -> dict[int, dict[int, tuple[str, ...]]]:
    """Per-anchor positives with the views that nominated each pair.

    Returns anchor id -> {positive id -> sorted view names}. Anchors whose
    union is empty are absent (and counted in a log line). The bulk
    collectors used here agree with the per-anchor operations above; tests
    hold them to that.
    """
    config.validate()
    views: dict[str, dict[int, set[int]]] = {}
    if "seq_time" in config.strategies:
        views["seq_time"] = _collect_seq_time(train_split, config.seq_window)
    if "geography" in config.strategies:
        geo_grid = grid or GridIndex(dataset.pois, config.geo_side_km)
        views["geography"] = {
            poi.id: found
            for poi in dataset.pois.values()
            if (
                found := geography_positives(
                    poi, dataset, config.geo_side_km, grid=geo_grid
                )
            )
        }
    if "functional" in config.strategies:
        views["functional"] = _collect_functional(dataset, attrs)

    out: dict[int, dict[int, tuple[str, ...]]] = {}
    for pid in dataset.pois:
        tagged: dict[int, list[str]] = {}
        for name in sorted(views):
            for positive in views[name].get(pid, ()):
                if positive != pid:
                    tagged.setdefault(positive, []).append(name)
        if tagged:
            out[pid] = {pos: tuple(names) for pos, names in sorted(tagged.items())}
    skipped = len(dataset.pois) - len(out)
    if skipped:
        logger.info("%d POIs have no positives under %s", skipped, list(config.strategies))
    return out


def build_batches(
    dataset: Dataset,
    positives: dict[int, dict[int, tuple[str, ...]]],
    config: SamplerConfig,
) -> list[TrainingBatch]:
    """One batch per (anchor, positive) pair, deterministic under the seed.

    Anchors ascend by id and positives ascend within each anchor, so the
    batch layout is stable; the only randomness is the negative draw.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    all_ids = sorted(dataset.pois)
    n_neg = config.batch_size - 2
    warned_replacement = False
    batches: list[TrainingBatch] = []
    for anchor in sorted(positives):
        pairs = positives[anchor]
        excluded = set(pairs) | {anchor}
        pool = np.array([pid for pid in all_ids if pid not in excluded], dtype=np.int64)
        if len(pool) == 0:
            raise UserError(
                f"anchor {anchor}: every other POI is a positive; cannot draw negatives"
            )
        replace = len(pool) < n_neg
        if replace and not warned_replacement:
            logger.warning(
                "negative pool smaller than %d; sampling with replacement", n_neg
            )
            warned_replacement = True
        chosen = sorted(pairs)
        if config.max_pairs_per_anchor is not None and len(chosen) > config.max_pairs_per_anchor:
            idx = rng.choice(len(chosen), size=config.max_pairs_per_anchor, replace=False)
            chosen = [chosen[i] for i in sorted(idx)]
        for positive in chosen:
            negs = rng.choice(pool, size=n_neg, replace=replace)
            batches.append(
                TrainingBatch(
                    poi_ids=(anchor, positive, *(int(x) for x in negs)),
                    sources=pairs[positive],
                )
            )
    if not batches:
        raise UserError("no (anchor, positive) pairs found; corpus too sparse to train")
    logger.info(
        "built %d batches from %d anchors (batch_size=%d)",
        len(batches),
        len(positives),
        config.batch_size,
    )
    return batches


def dump_batches(batches: list[TrainingBatch], path) -> None:
    """Audit dump, one JSON object per batch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for batch in batches:
            fh.write(
                json.dumps(
                    {
                        "anchor": batch.anchor_id,
                        "positive": batch.positive_id,
                        "negatives": list(batch.negative_ids),
                        "sources": list(batch.sources),
                    }
                )
                + "\n"
            )
