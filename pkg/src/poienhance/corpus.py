"""Check-in corpus loading, filtering, and splitting.

The canonical on-disk form is a headerless UTF-8 TSV with the columns

    user_id  poi_id  poi_name  category  lat  lon  iso_timestamp  tz_offset_minutes

A ``foursquare`` adapter maps the public Foursquare check-in layout
(user, venue id, category id, category name, lat, lon, tz offset, UTC time
string) onto the same in-memory model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import DataFormatError, UserError

logger = logging.getLogger(__name__)

# Tolerated fraction of unparseable lines before the adapter is assumed wrong.
MAX_MALFORMED_FRACTION = 0.01


@dataclass(frozen=True)
class Poi:
    """A point of interest: integer id, display name, category, coordinates."""

    id: int
    name: str
    category: str
    lon: float
    lat: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"poi {self.id}: lat {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"poi {self.id}: lon {self.lon} outside [-180, 180]")
        if not self.category:
            raise ValueError(f"poi {self.id}: empty category")


@dataclass(frozen=True)
class CheckinRecord:
    """One visit: user visited ``poi_id`` at ``timestamp`` (epoch seconds).

    ``tz_offset_min`` is the local-time offset used for all calendar logic
    (weekday, date, hour-of-day).
    """

    user: str
    poi_id: int
    timestamp: int
    tz_offset_min: int = 0

    def local_datetime(self) -> datetime:
        tz = timezone(timedelta(minutes=self.tz_offset_min))
        return datetime.fromtimestamp(self.timestamp, tz)

    def local_date(self):
        return self.local_datetime().date()


@dataclass
class CheckinSequence:
    """All of one user's check-ins, ordered by time."""

    user: str
    records: list[CheckinRecord]

    def __len__(self):
        return len(self.records)


@dataclass
class Dataset:
    """POI table plus per-user check-in sequences."""

    pois: dict[int, Poi]
    sequences: list[CheckinSequence]
    category_vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.category_vocab:
            self.category_vocab = sorted({p.category for p in self.pois.values()})

    @property
    def n_pois(self) -> int:
        return len(self.pois)

    @property
    def n_checkins(self) -> int:
        return sum(len(s) for s in self.sequences)

    def poi_ids(self) -> list[int]:
        return sorted(self.pois)

    def records_by_poi(self) -> dict[int, list[CheckinRecord]]:
        out: dict[int, list[CheckinRecord]] = {pid: [] for pid in self.pois}
        for seq in self.sequences:
            for rec in seq.records:
                out[rec.poi_id].append(rec)
        return out

    def checkin_counts(self) -> dict[int, int]:
        counts = {pid: 0 for pid in self.pois}
        for seq in self.sequences:
            for rec in seq.records:
                counts[rec.poi_id] += 1
        return counts

    def validate(self) -> None:
        """Check referential integrity and ordering invariants."""
        for seq in self.sequences:
            last = None
            for rec in seq.records:
                if rec.poi_id not in self.pois:
                    raise DataFormatError(
                        f"record references unknown poi_id {rec.poi_id}"
                    )
                if rec.user != seq.user:
                    raise DataFormatError(
                        f"sequence for user {seq.user} contains record of {rec.user}"
                    )
                if last is not None and rec.timestamp < last:
                    raise DataFormatError(f"sequence {seq.user} not time-sorted")
                last = rec.timestamp
        expected_vocab = sorted({p.category for p in self.pois.values()})
        if self.category_vocab != expected_vocab:
            raise DataFormatError("category_vocab out of sync with POI table")


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------

_CANONICAL_COLUMNS = 8


def _parse_iso(value: str) -> int:
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _parse_canonical_line(line: str):
    parts = line.rstrip("\n").split("\t")
    if len(parts) != _CANONICAL_COLUMNS:
        raise ValueError(f"expected {_CANONICAL_COLUMNS} columns, got {len(parts)}")
    user, poi_id, name, category, lat, lon, ts, tz_off = parts
    poi = Poi(
        id=int(poi_id), name=name, category=category, lon=float(lon), lat=float(lat)
    )
    rec = CheckinRecord(
        user=user,
        poi_id=poi.id,
        timestamp=_parse_iso(ts),
        tz_offset_min=int(tz_off),
    )
    return poi, rec


class _FoursquareAdapter:
    """Maps the public Foursquare column layout onto the canonical schema.

    Columns: user_id, venue_id, venue_category_id, venue_category_name,
    latitude, longitude, tz_offset_minutes, utc_time
    (e.g. ``Tue Apr 03 18:00:06 +0000 2012``). Venue ids are strings and get
    assigned integer indices in order of first appearance.
    """

    def __init__(self):
        self._venue_index: dict[str, int] = {}

    def parse(self, line: str):
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 8:
            raise ValueError(f"expected 8 columns, got {len(parts)}")
        user, venue, _cat_id, cat_name, lat, lon, tz_off, utc_time = parts
        if venue not in self._venue_index:
            self._venue_index[venue] = len(self._venue_index)
        pid = self._venue_index[venue]
        poi = Poi(id=pid, name=venue, category=cat_name, lon=float(lon), lat=float(lat))
        ts = datetime.strptime(utc_time, "%a %b %d %H:%M:%S %z %Y")
        rec = CheckinRecord(
            user=user,
            poi_id=pid,
            timestamp=int(ts.timestamp()),
            tz_offset_min=int(tz_off),
        )
        return poi, rec


def load_checkins(path, fmt: str = "canonical") -> Dataset:
    """Load a check-in file into a :class:`Dataset`.

    Sequences are grouped per user and sorted by timestamp. Malformed lines
    are counted and logged; more than ``MAX_MALFORMED_FRACTION`` of them is
    fatal because it almost always means the wrong adapter was chosen.
    """
    path = Path(path)
    if not path.is_file():
        raise UserError(f"check-in file not found: {path}")
    if fmt == "canonical":
        parse = _parse_canonical_line
    elif fmt == "foursquare":
        parse = _FoursquareAdapter().parse
    else:
        raise UserError(f"unknown check-in adapter: {fmt!r}")

    pois: dict[int, Poi] = {}
    per_user: dict[str, list[CheckinRecord]] = {}
    total = 0
    malformed = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                poi, rec = parse(line)
                if not math.isfinite(rec.timestamp):
                    raise ValueError("non-finite timestamp")
            except (ValueError, OverflowError) as exc:
                malformed += 1
                logger.warning("%s:%d malformed line: %s", path, lineno, exc)
                continue
            known = pois.get(poi.id)
            if known is not None and known != poi:
                logger.warning(
                    "%s:%d poi %d redefined; keeping first definition",
                    path,
                    lineno,
                    poi.id,
                )
            else:
                pois[poi.id] = poi
            per_user.setdefault(rec.user, []).append(rec)

    if total and malformed / total > MAX_MALFORMED_FRACTION:
        raise DataFormatError(
            f"{malformed}/{total} malformed lines in {path}; wrong adapter?"
        )
    if malformed:
        logger.warning("%s: skipped %d malformed of %d lines", path, malformed, total)

    sequences = [
        CheckinSequence(user=user, records=sorted(recs, key=lambda r: r.timestamp))
        for user, recs in sorted(per_user.items())
    ]
    ds = Dataset(pois=pois, sequences=sequences)
    ds.validate()
    return ds


def save_checkins(ds: Dataset, path) -> None:
    """Write a dataset in canonical TSV form (inverse of the loader)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for seq in ds.sequences:
            for rec in seq.records:
                poi = ds.pois[rec.poi_id]
                ts = datetime.fromtimestamp(rec.timestamp, timezone.utc).strftime(
                    "%Y-%m-%dT%H:%M:%S+00:00"
                )
                fields = (
                    rec.user,
                    str(poi.id),
                    _clean_field(poi.name),
                    _clean_field(poi.category),
                    repr(poi.lat),
                    repr(poi.lon),
                    ts,
                    str(rec.tz_offset_min),
                )
                fh.write("\t".join(fields) + "\n")


def _clean_field(value: str) -> str:
    return value.replace("\t", " ").replace("\n", " ")


# ---------------------------------------------------------------------------
# Filtering and splitting
# ---------------------------------------------------------------------------


def filter_dataset(
    ds: Dataset, min_poi_checkins: int = 5, min_seq_len: int = 10
) -> Dataset:
    """Drop rare POIs and short sequences, iterating to a fixpoint.

    Removing a POI shortens sequences, which can push them below the length
    threshold; removing a sequence lowers POI check-in counts. The loop
    repeats both removals until neither fires, so the result satisfies both
    constraints simultaneously regardless of application order.
    """
    if min_poi_checkins < 1 or min_seq_len < 1:
        raise UserError("filter thresholds must be >= 1")

    pois = dict(ds.pois)
    sequences = [CheckinSequence(s.user, list(s.records)) for s in ds.sequences]
    while True:
        counts: dict[int, int] = {pid: 0 for pid in pois}
        for seq in sequences:
            for rec in seq.records:
                counts[rec.poi_id] += 1
        bad_pois = {pid for pid, c in counts.items() if c < min_poi_checkins}
        changed = bool(bad_pois)
        if bad_pois:
            pois = {pid: p for pid, p in pois.items() if pid not in bad_pois}
            for seq in sequences:
                seq.records = [r for r in seq.records if r.poi_id not in bad_pois]
        kept = [s for s in sequences if len(s) >= min_seq_len]
        changed = changed or len(kept) != len(sequences)
        sequences = kept
        if not changed:
            break

    if not pois or not sequences:
        raise DataFormatError(
            "filtering emptied the dataset "
            f"(started with {ds.n_pois} POIs / {len(ds.sequences)} sequences, "
            f"thresholds {min_poi_checkins}/{min_seq_len})"
        )
    out = Dataset(pois=pois, sequences=sequences)
    logger.info(
        "filtered dataset: %d -> %d POIs, %d -> %d sequences",
        ds.n_pois,
        out.n_pois,
        len(ds.sequences),
        len(out.sequences),
    )
    return out


def largest_remainder_counts(n: int, ratios: tuple[int, ...]) -> list[int]:
    """Partition ``n`` items into integer counts proportional to ``ratios``.

    Floors the exact quotas, then hands the leftover items to the parts with
    the largest fractional remainder (ties broken by position).
    """
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    counts = [int(q) for q in quotas]
    remainders = sorted(
        range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_sequences(
    ds: Dataset, ratios: tuple[int, int, int] = (2, 1, 7), seed: int = 0
) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle sequences with ``seed`` and partition them test/val/train.

    All three outputs share the full POI table, so downstream indices agree.
    """
    if any(r <= 0 for r in ratios):
        raise UserError("split ratios must be positive")
    n = len(ds.sequences)
    if n < 10:
        raise UserError(f"only {n} sequences; too few to split {ratios}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    counts = largest_remainder_counts(n, ratios)
    parts = []
    start = 0
    for c in counts:
        idx = sorted(order[start : start + c])
        parts.append(
            Dataset(
                pois=ds.pois,
                sequences=[ds.sequences[i] for i in idx],
                category_vocab=list(ds.category_vocab),
            )
        )
        start += c
    test, val, train = parts
    return test, val, train
