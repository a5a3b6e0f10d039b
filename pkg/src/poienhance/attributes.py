"""Derived POI attributes: visit pattern, address, surrounding categories.

Visit patterns come from a statistical scan of the check-in records, the
address from a reverse-geocoding client (see :mod:`poienhance.geocode`), and
the surrounding attribute from a square-window scan over the POI table backed
by a uniform lat/lon grid index.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .corpus import CheckinRecord, Dataset, Poi
from .errors import DataFormatError

logger = logging.getLogger(__name__)

KM_PER_DEGREE = 111.32


class Weekly(Enum):
    WEEKDAY = "Weekday"
    WEEKEND = "Weekend"


class DaySlot(Enum):
    """The seven daily time slots, in tie-break order."""

    EARLY_MORNING = "EarlyMorning"  # [06, 09)
    MORNING = "Morning"  # [09, 11)
    NOON = "Noon"  # [11, 13)
    AFTERNOON = "Afternoon"  # [13, 17)
    EVENING = "Evening"  # [17, 19)
    NIGHT = "Night"  # [19, 24)
    MIDNIGHT = "Midnight"  # [00, 06)


_SLOT_BY_HOUR = {}
for _h in range(24):
    if 6 <= _h < 9:
        _SLOT_BY_HOUR[_h] = DaySlot.EARLY_MORNING
    elif 9 <= _h < 11:
        _SLOT_BY_HOUR[_h] = DaySlot.MORNING
    elif 11 <= _h < 13:
        _SLOT_BY_HOUR[_h] = DaySlot.NOON
    elif 13 <= _h < 17:
        _SLOT_BY_HOUR[_h] = DaySlot.AFTERNOON
    elif 17 <= _h < 19:
        _SLOT_BY_HOUR[_h] = DaySlot.EVENING
    elif 19 <= _h < 24:
        _SLOT_BY_HOUR[_h] = DaySlot.NIGHT
    else:
        _SLOT_BY_HOUR[_h] = DaySlot.MIDNIGHT


@dataclass(frozen=True)
class VisitPattern:
    weekly: Weekly
    daily: DaySlot


@dataclass(frozen=True)
class Address:
    """Reverse-geocoded address parts; any field may be absent (None)."""

    street: str | None = None
    house_number: str | None = None
    postal_code: str | None = None

    def is_empty(self) -> bool:
        return self.street is None and self.house_number is None and self.postal_code is None


@dataclass(frozen=True)
class Surrounding:
    """Top (at most three) categories among nearby POIs."""

    top_categories: tuple[str, ...] = ()


@dataclass(frozen=True)
class PoiAttributes:
    poi_id: int
    visit_pattern: VisitPattern
    address: Address
    surrounding: Surrounding


def day_slot(record: CheckinRecord) -> DaySlot:
    """Map a record's local hour onto one of the seven daily slots."""
    return _SLOT_BY_HOUR[record.local_datetime().hour]


def derive_visit_pattern(records: list[CheckinRecord]) -> VisitPattern:
    """Dominant weekday/weekend class and dominant daily slot.

    Ties go to Weekday and to the earliest slot in enum order; both rules are
    arbitrary but fixed so the derivation is deterministic.
    """
    if not records:
        raise ValueError("derive_visit_pattern needs at least one record")
    weekday = weekend = 0
    slot_counts: Counter[DaySlot] = Counter()
    for rec in records:
        if rec.local_datetime().weekday() < 5:
            weekday += 1
        else:
            weekend += 1
        slot_counts[day_slot(rec)] += 1
    weekly = Weekly.WEEKDAY if weekday >= weekend else Weekly.WEEKEND
    best = max(DaySlot, key=lambda s: (slot_counts.get(s, 0), -list(DaySlot).index(s)))
    return VisitPattern(weekly=weekly, daily=best)


def square_contains(center: Poi, candidate: Poi, side_km: float) -> bool:
    """Is ``candidate`` inside the axis-aligned square around ``center``?

    Uses the equirectangular approximation (KM_PER_DEGREE km per degree of
    latitude, scaled by cos(lat) for longitude); at sub-km scales the error
    versus haversine is negligible.
    """
    if side_km <= 0:
        raise ValueError("side_km must be positive")
    half = side_km / 2.0
    dlat_km = abs(candidate.lat - center.lat) * KM_PER_DEGREE
    dlon_km = (
        abs(candidate.lon - center.lon)
        * KM_PER_DEGREE
        * math.cos(math.radians(center.lat))
    )
    return dlat_km <= half and dlon_km <= half


class GridIndex:
    """Uniform lat/lon grid over a POI table for square-window queries.

    Cell sizes are chosen at least ``side_km`` wide (longitude sized at the
    dataset's most extreme latitude), so every square of side ``side_km``
    fits inside the 3x3 block of cells around its center.
    """

    def __init__(self, pois: dict[int, Poi], side_km: float):
        if side_km <= 0:
            raise ValueError("side_km must be positive")
        self.side_km = side_km
        self._cell_lat = side_km / KM_PER_DEGREE
        max_abs_lat = max((abs(p.lat) for p in pois.values()), default=0.0)
        # Clamp away from the poles where cos(lat) degenerates.
        cos_min = max(math.cos(math.radians(min(max_abs_lat, 85.0))), 1e-6)
        self._cell_lon = side_km / (KM_PER_DEGREE * cos_min)
        self._cells: dict[tuple[int, int], list[int]] = {}
        self._pois = pois
        for pid, p in pois.items():
            self._cells.setdefault(self._cell_of(p), []).append(pid)

    def _cell_of(self, p: Poi) -> tuple[int, int]:
        return (
            math.floor(p.lat / self._cell_lat),
            math.floor(p.lon / self._cell_lon),
        )

    def candidates(self, center: Poi) -> list[int]:
        """Poi ids in the 3x3 cell neighborhood of ``center`` (itself included)."""
        ci, cj = self._cell_of(center)
        out: list[int] = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                out.extend(self._cells.get((ci + di, cj + dj), ()))
        return out

    def neighbors_in_square(self, center: Poi) -> list[int]:
        """Ids of all other POIs inside the square window around ``center``."""
        return [
            pid
            for pid in self.candidates(center)
            if pid != center.id
            and square_contains(center, self._pois[pid], self.side_km)
        ]


def derive_surrounding(
    poi: Poi,
    dataset: Dataset,
    side_km: float = 0.5,
    grid: GridIndex | None = None,
) -> Surrounding:
    """Top three categories among the other POIs in the square around ``poi``.

    The anchor's own category does not count. Ordering is by descending count
    and then ascending category name.
    """
    if grid is None:
        grid = GridIndex(dataset.pois, side_km)
    counts: Counter[str] = Counter()
    for pid in grid.neighbors_in_square(poi):
        counts[dataset.pois[pid].category] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Surrounding(top_categories=tuple(cat for cat, _ in ranked[:3]))


def derive_attributes(
    dataset: Dataset, geocoder, side_km: float = 0.5
) -> dict[int, PoiAttributes]:
    """Derive all three extra attributes for every POI in ``dataset``.

    ``geocoder`` is any object with ``reverse(lat, lon) -> Address`` (see
    :mod:`poienhance.geocode`).
    """
    by_poi = dataset.records_by_poi()
    grid = GridIndex(dataset.pois, side_km)
    out: dict[int, PoiAttributes] = {}
    for pid in dataset.poi_ids():
        poi = dataset.pois[pid]
        records = by_poi.get(pid, [])
        if not records:
            raise DataFormatError(
                f"poi {pid} has no check-ins; run filter_dataset first"
            )
        out[pid] = PoiAttributes(
            poi_id=pid,
            visit_pattern=derive_visit_pattern(records),
            address=geocoder.reverse(poi.lat, poi.lon),
            surrounding=derive_surrounding(poi, dataset, side_km, grid=grid),
        )
    return out


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------


def save_attributes(attrs: dict[int, PoiAttributes], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for pid in sorted(attrs):
            a = attrs[pid]
            fh.write(
                json.dumps(
                    {
                        "poi_id": a.poi_id,
                        "weekly": a.visit_pattern.weekly.value,
                        "daily": a.visit_pattern.daily.value,
                        "street": a.address.street,
                        "house_number": a.address.house_number,
                        "postal_code": a.address.postal_code,
                        "surrounding": list(a.surrounding.top_categories),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_attributes(path) -> dict[int, PoiAttributes]:
    out: dict[int, PoiAttributes] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out[row["poi_id"]] = PoiAttributes(
                poi_id=row["poi_id"],
                visit_pattern=VisitPattern(
                    weekly=Weekly(row["weekly"]), daily=DaySlot(row["daily"])
                ),
                address=Address(
                    street=row.get("street"),
                    house_number=row.get("house_number"),
                    postal_code=row.get("postal_code"),
                ),
                surrounding=Surrounding(tuple(row.get("surrounding", ()))),
            )
    return out
