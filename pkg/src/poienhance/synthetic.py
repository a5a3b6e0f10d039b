"""Synthetic corpora for demos and tests.

``synthetic_city`` builds a city whose structure the pipeline can actually
exploit: categories live in spatial clusters, every category has a visit-time
habit, and users spend each day inside one category cluster. Geographic,
functional, and sequence-time positives therefore mostly agree with category
identity, which is what the end-to-end quality checks lean on.

The smaller generators build targeted fixtures: a deterministic next-POI
corpus for recommendation memorization, a dense hourly-visit corpus for flow
series, and per-category one-hot or random embedding matrices.
"""

from __future__ import annotations

import numpy as np

from .attributes import DaySlot
from .corpus import CheckinRecord, CheckinSequence, Dataset, Poi
from .geocode import FixtureGeocoder, coordinate_key
from .model import EmbeddingMatrix

_SLOT_HOURS = {
    DaySlot.EARLY_MORNING: (6, 9),
    DaySlot.MORNING: (9, 11),
    DaySlot.NOON: (11, 13),
    DaySlot.AFTERNOON: (13, 17),
    DaySlot.EVENING: (17, 19),
    DaySlot.NIGHT: (19, 24),
    DaySlot.MIDNIGHT: (0, 6),
}

_BASE_EPOCH = 1333324800  # 2012-04-02 00:00:00 UTC, a Monday


def _habit_hour(rng, slot: DaySlot) -> int:
    lo, hi = _SLOT_HOURS[slot]
    return int(rng.integers(lo, hi))


def _habit_day(rng, weekend: bool, n_weeks: int) -> int:
    week = int(rng.integers(0, n_weeks))
    if weekend:
        return week * 7 + int(rng.integers(5, 7))
    return week * 7 + int(rng.integers(0, 5))


def synthetic_city(
    n_pois: int = 500,
    n_categories: int = 10,
    n_users: int = 50,
    visits_per_poi: int = 8,
    n_weeks: int = 8,
    habit_strength: float = 0.85,
    base_lat: float = 40.75,
    base_lon: float = -73.98,
    cluster_std_km: float = 0.12,
    cluster_gap_km: float = 3.0,
    seed: int = 0,
) -> Dataset:
    """A clustered synthetic city.

    Category k's POIs scatter around a dedicated center, far from the other
    centers, and share a visit habit (day slot and weekday/weekend class).
    Each visit is assigned to a user whose home category matches, so user
    days stay within one cluster. Every POI receives at least
    ``visits_per_poi`` check-ins, enough to survive default filtering.
    """
    if n_categories < 2 or n_pois < n_categories or n_users < 1:
        raise ValueError("need >= 2 categories, n_pois >= n_categories, >= 1 user")
    rng = np.random.default_rng(seed)
    slots = list(DaySlot)
    lat_deg_per_km = 1.0 / 111.32
    lon_deg_per_km = 1.0 / (111.32 * np.cos(np.radians(base_lat)))

    grid_cols = int(np.ceil(np.sqrt(n_categories)))
    centers = []
    for k in range(n_categories):
        row, col = divmod(k, grid_cols)
        centers.append(
            (
                base_lat + row * cluster_gap_km * lat_deg_per_km,
                base_lon + col * cluster_gap_km * lon_deg_per_km,
            )
        )

    pois: dict[int, Poi] = {}
    for pid in range(n_pois):
        cat = pid % n_categories
        clat, clon = centers[cat]
        pois[pid] = Poi(
            id=pid,
            name=f"Venue {pid}",
            category=f"Category{cat:02d}",
            lat=float(clat + rng.normal(0.0, cluster_std_km * lat_deg_per_km)),
            lon=float(clon + rng.normal(0.0, cluster_std_km * lon_deg_per_km)),
        )

    by_user: dict[str, list[CheckinRecord]] = {f"u{u}": [] for u in range(n_users)}
    users_of_cat = {
        k: [f"u{u}" for u in range(n_users) if u % n_categories == k]
        or [f"u{u % n_users}"]
        for k in range(n_categories)
    }

    for pid in range(n_pois):
        cat = pid % n_categories
        slot = slots[cat % len(slots)]
        weekend = cat % 2 == 1
        candidates = users_of_cat[cat]
        for _visit in range(visits_per_poi):
            user = candidates[int(rng.integers(0, len(candidates)))]
            if rng.random() < habit_strength:
                day = _habit_day(rng, weekend, n_weeks)
                hour = _habit_hour(rng, slot)
            else:
                day = int(rng.integers(0, n_weeks * 7))
                hour = int(rng.integers(0, 24))
            ts = _BASE_EPOCH + day * 86400 + hour * 3600 + int(rng.integers(0, 3600))
            by_user[user].append(
                CheckinRecord(user=user, poi_id=pid, timestamp=ts, tz_offset_min=0)
            )

    sequences = [
        CheckinSequence(user=user, records=sorted(recs, key=lambda r: r.timestamp))
        for user, recs in sorted(by_user.items())
        if recs
    ]
    ds = Dataset(pois=pois, sequences=sequences)
    ds.validate()
    return ds


def synthetic_geocoder(dataset: Dataset, seed: int = 0) -> FixtureGeocoder:
    """Deterministic offline geocoder covering every POI in ``dataset``."""
    rng = np.random.default_rng(seed)
    streets = [
        "Wall Street",
        "Broadway",
        "Park Avenue",
        "Canal Street",
        "Mott Street",
        "Houston Street",
        "Elm Street",
        "Bleecker Street",
    ]
    fixtures = {}
    for poi in dataset.pois.values():
        fixtures[coordinate_key(poi.lat, poi.lon)] = {
            "address": {
                "road": streets[int(rng.integers(0, len(streets)))],
                "house_number": str(int(rng.integers(1, 400))),
                "postcode": f"{10000 + int(rng.integers(0, 300)):05d}",
            }
        }
    return FixtureGeocoder(fixtures)


def memorization_corpus(
    n_pois: int = 8, n_users: int = 6, steps: int = 120, seed: int = 0
) -> Dataset:
    """Every user walks the same POI cycle: the next POI is a deterministic
    function of the current one, so a sequence model can memorize it."""
    pois = {
        pid: Poi(
            id=pid,
            name=f"Stop {pid}",
            category=f"Loop{pid % 3}",
            lat=40.7 + 0.001 * pid,
            lon=-74.0 + 0.001 * pid,
        )
        for pid in range(n_pois)
    }
    rng = np.random.default_rng(seed)
    sequences = []
    for u in range(n_users):
        start = int(rng.integers(0, n_pois))
        records = []
        for step in range(steps):
            pid = (start + step) % n_pois
            ts = _BASE_EPOCH + u * 100 + step * 3600
            records.append(
                CheckinRecord(user=f"w{u}", poi_id=pid, timestamp=ts, tz_offset_min=0)
            )
        sequences.append(CheckinSequence(user=f"w{u}", records=records))
    ds = Dataset(pois=pois, sequences=sequences)
    ds.validate()
    return ds


def busy_venues(
    n_pois: int = 12, days: int = 6, n_users: int = 4, seed: int = 0
) -> Dataset:
    """Dense hourly visits so flow series have long non-zero runs.

    Counts follow a diurnal profile with occasional forced quiet hours, so
    runs break up and per-series variance stays positive.
    """
    rng = np.random.default_rng(seed)
    pois = {
        pid: Poi(
            id=pid,
            name=f"Hall {pid}",
            category=f"Venue{pid % 3}",
            lat=40.7 + 0.002 * pid,
            lon=-74.0 + 0.002 * pid,
        )
        for pid in range(n_pois)
    }
    by_user: dict[str, list[CheckinRecord]] = {f"f{u}": [] for u in range(n_users)}
    for pid in range(n_pois):
        for hour in range(days * 24):
            if (hour + pid) % 29 < 3:  # quiet stretch splits the runs
                continue
            base = 1.5 + np.sin(2 * np.pi * (hour % 24) / 24.0 + pid)
            count = int(rng.poisson(max(0.2, base)))
            for v in range(count):
                user = f"f{int(rng.integers(0, n_users))}"
                ts = _BASE_EPOCH + hour * 3600 + v * 60
                by_user[user].append(
                    CheckinRecord(user=user, poi_id=pid, timestamp=ts, tz_offset_min=0)
                )
    sequences = [
        CheckinSequence(user=user, records=sorted(recs, key=lambda r: r.timestamp))
        for user, recs in sorted(by_user.items())
        if recs
    ]
    ds = Dataset(pois=pois, sequences=sequences)
    ds.validate()
    return ds


def one_hot_category_embeddings(dataset: Dataset) -> EmbeddingMatrix:
    ids = dataset.poi_ids()
    cat_index = {c: i for i, c in enumerate(dataset.category_vocab)}
    matrix = np.zeros((len(ids), len(cat_index)), dtype=np.float32)
    for row, pid in enumerate(ids):
        matrix[row, cat_index[dataset.pois[pid].category]] = 1.0
    return EmbeddingMatrix(
        poi_ids=ids, matrix=matrix, role="base", meta={"provider": "one-hot-category"}
    )


def random_embeddings(dataset: Dataset, dim: int = 64, seed: int = 0) -> EmbeddingMatrix:
    ids = dataset.poi_ids()
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((len(ids), dim)).astype(np.float32)
    return EmbeddingMatrix(
        poi_ids=ids,
        matrix=matrix,
        role="base",
        meta={"provider": "random", "seed": seed},
    )
