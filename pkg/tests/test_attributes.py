"""Derived POI attributes: visit pattern, square windows, surroundings."""

import math

import pytest

from poienhance.attributes import (
    KM_PER_DEGREE,
    Address,
    DaySlot,
    GridIndex,
    PoiAttributes,
    Surrounding,
    VisitPattern,
    Weekly,
    day_slot,
    derive_attributes,
    derive_surrounding,
    derive_visit_pattern,
    load_attributes,
    save_attributes,
    square_contains,
)
from poienhance.corpus import CheckinRecord, CheckinSequence, Dataset, Poi
from poienhance.errors import DataFormatError
from poienhance.geocode import FixtureGeocoder

# Independent hour -> slot table, written straight from the slot boundaries.
_EXPECTED_SLOT = {}
for h in range(24):
    if h < 6:
        _EXPECTED_SLOT[h] = DaySlot.MIDNIGHT
    elif h < 9:
        _EXPECTED_SLOT[h] = DaySlot.EARLY_MORNING
    elif h < 11:
        _EXPECTED_SLOT[h] = DaySlot.MORNING
    elif h < 13:
        _EXPECTED_SLOT[h] = DaySlot.NOON
    elif h < 17:
        _EXPECTED_SLOT[h] = DaySlot.AFTERNOON
    elif h < 19:
        _EXPECTED_SLOT[h] = DaySlot.EVENING
    else:
        _EXPECTED_SLOT[h] = DaySlot.NIGHT


def _rec_at_hour(hour: int, day: int = 0) -> CheckinRecord:
    # 2012-04-02 (a Monday) 00:00 UTC as the base
    ts = 1_333_324_800 + day * 86400 + hour * 3600
    return CheckinRecord("u", 1, ts, tz_offset_min=0)


def test_day_slot_covers_every_hour():
    for hour in range(24):
        assert day_slot(_rec_at_hour(hour)) is _EXPECTED_SLOT[hour], hour


def test_visit_pattern_majorities():
    # three weekday mornings vs two weekend nights
    recs = [_rec_at_hour(9, day=d) for d in range(3)]
    recs += [_rec_at_hour(20, day=5), _rec_at_hour(21, day=6)]
    vp = derive_visit_pattern(recs)
    assert vp.weekly is Weekly.WEEKDAY
    assert vp.daily is DaySlot.MORNING


def test_visit_pattern_majority_weekend():
    recs = [_rec_at_hour(14, day=5), _rec_at_hour(14, day=6), _rec_at_hour(9, day=0)]
    vp = derive_visit_pattern(recs)
    assert vp.weekly is Weekly.WEEKEND
    assert vp.daily is DaySlot.AFTERNOON


def test_visit_pattern_tie_breaks_fixed():
    # 1 weekday vs 1 weekend -> Weekday; Noon vs Night tie -> earlier slot
    recs = [_rec_at_hour(12, day=0), _rec_at_hour(20, day=5)]
    vp = derive_visit_pattern(recs)
    assert vp.weekly is Weekly.WEEKDAY
    assert vp.daily is DaySlot.NOON
    with pytest.raises(ValueError):
        derive_visit_pattern([])


def test_square_contains_hand_cases():
    center = Poi(id=0, name="c", category="x", lat=40.0, lon=-74.0)

    def poi_at(dlat_km, dlon_km, pid=1):
        lat = 40.0 + dlat_km / KM_PER_DEGREE
        lon = -74.0 + dlon_km / (KM_PER_DEGREE * math.cos(math.radians(40.0)))
        return Poi(id=pid, name="p", category="x", lat=lat, lon=lon)

    # side 0.5 km -> half-width 0.25 km on each axis
    assert square_contains(center, poi_at(0.2, 0.0), 0.5)
    assert square_contains(center, poi_at(0.0, -0.24), 0.5)
    assert square_contains(center, poi_at(0.2, 0.2), 0.5)
    assert not square_contains(center, poi_at(0.3, 0.0), 0.5)
    assert not square_contains(center, poi_at(0.0, 0.3), 0.5)
    assert square_contains(center, center, 0.5)
    with pytest.raises(ValueError):
        square_contains(center, center, 0.0)


def test_square_is_square_not_circle():
    # A corner point at (0.2, 0.2) km is 0.28 km from the center: outside a
    # 0.25 km-radius circle but inside the square window.
    center = Poi(id=0, name="c", category="x", lat=40.0, lon=-74.0)
    corner = Poi(
        id=1,
        name="p",
        category="x",
        lat=40.0 + 0.2 / KM_PER_DEGREE,
        lon=-74.0 + 0.2 / (KM_PER_DEGREE * math.cos(math.radians(40.0))),
    )
    assert math.hypot(0.2, 0.2) > 0.25
    assert square_contains(center, corner, 0.5)


def _random_pois(rng, n, spread_km=1.2, lat0=40.75, lon0=-73.98):
    pois = {}
    for pid in range(n):
        dlat = rng.uniform(-spread_km, spread_km) / KM_PER_DEGREE
        dlon = rng.uniform(-spread_km, spread_km) / (
            KM_PER_DEGREE * math.cos(math.radians(lat0))
        )
        pois[pid] = Poi(
            id=pid,
            name=f"p{pid}",
            category=f"cat{pid % 4}",
            lat=lat0 + dlat,
            lon=lon0 + dlon,
        )
    return pois


def test_grid_index_matches_all_pairs_scan(rng):
    for trial in range(8):
        pois = _random_pois(rng, int(rng.integers(10, 80)))
        side = float(rng.uniform(0.2, 0.9))
        grid = GridIndex(pois, side)
        for center in pois.values():
            brute = sorted(
                p.id
                for p in pois.values()
                if p.id != center.id and square_contains(center, p, side)
            )
            assert sorted(grid.neighbors_in_square(center)) == brute


def test_grid_index_rejects_bad_side():
    with pytest.raises(ValueError):
        GridIndex({}, 0.0)


def test_derive_surrounding_ranking_and_anchor_exclusion():
    # 3 Food, 2 Bar, 2 Art, 1 Zoo near the anchor; anchor itself is Food but
    # must not count toward the Food tally.
    lat0, lon0 = 40.75, -73.98
    step = 0.02 / KM_PER_DEGREE  # 20 m apart, all inside the window
    cats = ["Food", "Food", "Food", "Bar", "Bar", "Art", "Art", "Zoo"]
    pois = {
        0: Poi(id=0, name="anchor", category="Food", lat=lat0, lon=lon0),
    }
    for i, cat in enumerate(cats, start=1):
        pois[i] = Poi(id=i, name=f"p{i}", category=cat, lat=lat0 + i * step, lon=lon0)
    # one far-away Food POI that must not appear
    pois[99] = Poi(id=99, name="far", category="Food", lat=lat0 + 1.0, lon=lon0)
    ds = Dataset(pois=pois, sequences=[])
    sur = derive_surrounding(pois[0], ds, side_km=0.5)
    assert sur.top_categories == ("Food", "Art", "Bar")  # count desc, name asc tie
    # anchor's own row excluded: seen Food count is 3, not 4
    sur_zoo = derive_surrounding(pois[8], ds, side_km=0.5)
    assert "Zoo" not in sur_zoo.top_categories


def test_derive_surrounding_empty_neighborhood():
    pois = {
        0: Poi(id=0, name="a", category="Food", lat=40.0, lon=-74.0),
        1: Poi(id=1, name="b", category="Bar", lat=41.0, lon=-74.0),
    }
    ds = Dataset(pois=pois, sequences=[])
    assert derive_surrounding(pois[0], ds, side_km=0.5).top_categories == ()


def test_derive_attributes_full_corpus(city, attrs):
    assert sorted(attrs) == city.poi_ids()
    for pid, a in attrs.items():
        assert a.poi_id == pid
        assert isinstance(a.visit_pattern.weekly, Weekly)
        assert isinstance(a.visit_pattern.daily, DaySlot)
        assert len(a.surrounding.top_categories) <= 3


def test_derive_attributes_needs_checkins():
    pois = {
        0: Poi(id=0, name="a", category="Food", lat=40.0, lon=-74.0),
        1: Poi(id=1, name="b", category="Bar", lat=40.0, lon=-74.0),
    }
    seqs = [CheckinSequence("u", [CheckinRecord("u", 0, 1_333_324_800)])]
    ds = Dataset(pois=pois, sequences=seqs)
    with pytest.raises(DataFormatError, match="no check-ins"):
        derive_attributes(ds, FixtureGeocoder())


def test_attributes_round_trip(tmp_path, attrs):
    path = tmp_path / "attrs.jsonl"
    save_attributes(attrs, path)
    back = load_attributes(path)
    assert back == attrs


def test_attributes_round_trip_absent_fields(tmp_path):
    attrs = {
        5: PoiAttributes(
            poi_id=5,
            visit_pattern=VisitPattern(Weekly.WEEKEND, DaySlot.MIDNIGHT),
            address=Address(),
            surrounding=Surrounding(),
        )
    }
    path = tmp_path / "attrs.jsonl"
    save_attributes(attrs, path)
    back = load_attributes(path)
    assert back == attrs
    assert back[5].address.is_empty()
