"""Positive mining views and contrastive batch construction."""

import json
import logging

import numpy as np
import pytest

from poienhance.attributes import (
    Address,
    DaySlot,
    GridIndex,
    PoiAttributes,
    Surrounding,
    VisitPattern,
    Weekly,
    derive_attributes,
    square_contains,
)
from poienhance.corpus import CheckinRecord, CheckinSequence, Dataset, Poi
from poienhance.errors import UserError
from poienhance.sampling import (
    STRATEGIES,
    SamplerConfig,
    TrainingBatch,
    build_batches,
    dump_batches,
    functional_positives,
    geography_positives,
    positive_sets,
    sequence_time_positives,
)
from poienhance.synthetic import synthetic_city, synthetic_geocoder

BASE_TS = 1_333_324_800  # 2012-04-02 00:00:00 UTC, a Monday


def _attrs_for(pid, weekly=Weekly.WEEKDAY, daily=DaySlot.NOON):
    return PoiAttributes(
        poi_id=pid,
        visit_pattern=VisitPattern(weekly, daily),
        address=Address(),
        surrounding=Surrounding(),
    )


def test_sampler_config_validation():
    SamplerConfig().validate()
    with pytest.raises(UserError, match="batch_size"):
        SamplerConfig(batch_size=2).validate()
    with pytest.raises(UserError, match="seq_window"):
        SamplerConfig(seq_window=-1).validate()
    SamplerConfig(seq_window=0).validate()  # window 0 is legal: no neighbors
    with pytest.raises(UserError, match="geo_side_km"):
        SamplerConfig(geo_side_km=0.0).validate()
    with pytest.raises(UserError, match="unknown sampling strategies"):
        SamplerConfig(strategies=("geo",)).validate()
    with pytest.raises(UserError, match="at least one"):
        SamplerConfig(strategies=()).validate()
    with pytest.raises(UserError, match="max_pairs_per_anchor"):
        SamplerConfig(max_pairs_per_anchor=0).validate()
    SamplerConfig(strategies=("functional",)).validate()


def test_training_batch_accessors():
    batch = TrainingBatch(poi_ids=(7, 3, 9, 1), sources=("geography",))
    assert batch.anchor_id == 7
    assert batch.positive_id == 3
    assert batch.negative_ids == (9, 1)


# ---------------------------------------------------------------------------
# per-record / per-POI view operations
# ---------------------------------------------------------------------------


def test_sequence_time_positives_window_and_date():
    recs = [
        CheckinRecord("u", 10, BASE_TS + 0),
        CheckinRecord("u", 11, BASE_TS + 3600),
        CheckinRecord("u", 10, BASE_TS + 7200),
        CheckinRecord("u", 12, BASE_TS + 10800),
        CheckinRecord("u", 13, BASE_TS + 86400 * 2),  # two days later
    ]
    seq = CheckinSequence("u", recs)
    # index 2 (poi 10), window 2: 11 and 12 share the date; the other record
    # of poi 10 is excluded as the same POI; 13 is on another date.
    assert sequence_time_positives(seq, 2, window=2) == {11, 12}
    assert sequence_time_positives(seq, 0, window=1) == {11}
    assert sequence_time_positives(seq, 0, window=0) == set()
    assert sequence_time_positives(seq, 4, window=2) == set()
    with pytest.raises(UserError, match="outside sequence"):
        sequence_time_positives(seq, 5, window=2)


def test_sequence_time_uses_local_dates():
    # Both records fall on 2012-04-02 in UTC, but at -240 minutes the first
    # is still on the local 1st, so they must not pair up.
    recs = [
        CheckinRecord("u", 1, BASE_TS + 3 * 3600, tz_offset_min=-240),
        CheckinRecord("u", 2, BASE_TS + 5 * 3600, tz_offset_min=-240),
    ]
    seq = CheckinSequence("u", recs)
    assert sequence_time_positives(seq, 0, window=1) == set()
    utc = CheckinSequence(
        "u",
        [
            CheckinRecord("u", 1, BASE_TS + 3 * 3600),
            CheckinRecord("u", 2, BASE_TS + 5 * 3600),
        ],
    )
    assert sequence_time_positives(utc, 0, window=1) == {2}


def _square_city():
    # Two Food POIs 20 m apart, one Food 2 km away, one Bar in between.
    lat0, lon0 = 40.75, -73.98
    deg = 1.0 / 111.32
    pois = {
        0: Poi(id=0, name="a", category="Food", lat=lat0, lon=lon0),
        1: Poi(id=1, name="b", category="Food", lat=lat0 + 0.02 * deg, lon=lon0),
        2: Poi(id=2, name="c", category="Food", lat=lat0 + 2.0 * deg, lon=lon0),
        3: Poi(id=3, name="d", category="Bar", lat=lat0 + 0.04 * deg, lon=lon0),
    }
    return Dataset(pois=pois, sequences=[])


def test_geography_positives_category_and_window():
    ds = _square_city()
    assert geography_positives(ds.pois[0], ds, side_km=0.5) == {1}
    assert geography_positives(ds.pois[2], ds, side_km=0.5) == set()
    assert geography_positives(ds.pois[3], ds, side_km=0.5) == set()  # lone Bar
    # the grid-backed path answers identically
    grid = GridIndex(ds.pois, 0.5)
    for poi in ds.pois.values():
        assert geography_positives(poi, ds, 0.5, grid=grid) == geography_positives(
            poi, ds, 0.5
        )


def test_geography_positives_grid_equals_brute_force_random():
    city = synthetic_city(n_pois=80, n_categories=6, n_users=16, seed=21)
    grid = GridIndex(city.pois, 0.5)
    for poi in city.pois.values():
        brute = {
            other.id
            for other in city.pois.values()
            if other.id != poi.id
            and other.category == poi.category
            and square_contains(poi, other, 0.5)
        }
        assert geography_positives(poi, city, 0.5, grid=grid) == brute


def test_functional_positives_requires_matching_pattern():
    ds = _square_city()
    attrs = {
        0: _attrs_for(0, Weekly.WEEKDAY, DaySlot.NOON),
        1: _attrs_for(1, Weekly.WEEKDAY, DaySlot.NOON),
        2: _attrs_for(2, Weekly.WEEKDAY, DaySlot.NIGHT),
        3: _attrs_for(3, Weekly.WEEKDAY, DaySlot.NOON),
    }
    # 1 shares category and full pattern; 2 shares category only; 3 shares
    # pattern but is a Bar.
    assert functional_positives(ds.pois[0], ds, attrs) == {1}
    assert functional_positives(ds.pois[2], ds, attrs) == set()
    assert functional_positives(ds.pois[3], ds, attrs) == set()
    with pytest.raises(UserError, match="attributes missing"):
        functional_positives(ds.pois[0], ds, {0: attrs[0]})


# ---------------------------------------------------------------------------
# corpus-level union: bulk collectors vs per-record operations
# ---------------------------------------------------------------------------


def _per_record_seq_union(split, window):
    out = {}
    for seq in split.sequences:
        for i, rec in enumerate(seq.records):
            found = sequence_time_positives(seq, i, window)
            if found:
                out.setdefault(rec.poi_id, set()).update(found)
    return out


def test_positive_sets_matches_per_record_ops(city, splits, attrs):
    _, _, train = splits
    config = SamplerConfig(batch_size=8, seq_window=2, geo_side_km=0.5, seed=0)
    sets = positive_sets(city, train, attrs, config)

    expected_seq = _per_record_seq_union(train, 2)
    grid = GridIndex(city.pois, 0.5)
    for pid, poi in city.pois.items():
        expected = set(expected_seq.get(pid, set()))
        expected |= geography_positives(poi, city, 0.5, grid=grid)
        expected |= functional_positives(poi, city, attrs)
        got = set(sets.get(pid, {}))
        assert got == expected, pid
        assert pid not in got


def test_positive_sets_tags_every_nominating_view(city, splits, attrs):
    _, _, train = splits
    config = SamplerConfig(batch_size=8, seq_window=2, seed=0)
    sets = positive_sets(city, train, attrs, config)
    expected_seq = _per_record_seq_union(train, 2)
    grid = GridIndex(city.pois, 0.5)
    seen_multi = 0
    for anchor, tagged in sets.items():
        poi = city.pois[anchor]
        geo = geography_positives(poi, city, 0.5, grid=grid)
        fun = functional_positives(poi, city, attrs)
        seq = expected_seq.get(anchor, set())
        for positive, sources in tagged.items():
            want = sorted(
                name
                for name, members in (
                    ("functional", fun),
                    ("geography", geo),
                    ("seq_time", seq),
                )
                if positive in members
            )
            assert list(sources) == want
            if len(sources) > 1:
                seen_multi += 1
    assert seen_multi > 0  # the synthetic city produces overlapping views


def test_positive_sets_respects_strategy_subset(city, splits, attrs):
    _, _, train = splits
    only_geo = positive_sets(
        city, train, attrs, SamplerConfig(strategies=("geography",))
    )
    grid = GridIndex(city.pois, 0.5)
    for anchor, tagged in only_geo.items():
        expected = geography_positives(city.pois[anchor], city, 0.5, grid=grid)
        assert set(tagged) == expected
        assert all(s == ("geography",) for s in tagged.values())


def test_seq_time_ignores_non_train_splits(city, splits, attrs):
    test_split, _, train = splits
    cfg = SamplerConfig(strategies=("seq_time",), seq_window=2)
    from_train = positive_sets(city, train, attrs, cfg)
    expected = _per_record_seq_union(train, 2)
    assert {a: set(p) for a, p in from_train.items()} == expected


# ---------------------------------------------------------------------------
# batch construction
# ---------------------------------------------------------------------------


def test_build_batches_structure(city, splits, attrs):
    _, _, train = splits
    config = SamplerConfig(batch_size=10, seed=3)
    sets = positive_sets(city, train, attrs, config)
    batches = build_batches(city, sets, config)
    n_pairs = sum(len(p) for p in sets.values())
    assert len(batches) == n_pairs
    ids = set(city.pois)
    for batch in batches:
        assert len(batch.poi_ids) == 10
        assert set(batch.poi_ids) <= ids
        positives = set(sets[batch.anchor_id])
        assert batch.positive_id in positives
        assert batch.sources == sets[batch.anchor_id][batch.positive_id]
        negs = batch.negative_ids
        assert len(set(negs)) == len(negs)  # pool is large: no replacement
        assert not (set(negs) & (positives | {batch.anchor_id}))
    # anchors ascend, positives ascend within an anchor
    anchors = [b.anchor_id for b in batches]
    assert anchors == sorted(anchors)


def test_build_batches_deterministic(city, splits, attrs):
    _, _, train = splits
    config = SamplerConfig(batch_size=10, seed=3)
    sets = positive_sets(city, train, attrs, config)
    a = build_batches(city, sets, config)
    b = build_batches(city, sets, config)
    assert a == b
    c = build_batches(city, sets, SamplerConfig(batch_size=10, seed=4))
    assert [x.poi_ids[:2] for x in a] == [x.poi_ids[:2] for x in c]
    assert any(x.negative_ids != y.negative_ids for x, y in zip(a, c))


def test_build_batches_max_pairs_subsample(city, splits, attrs):
    _, _, train = splits
    config = SamplerConfig(batch_size=8, seed=0, max_pairs_per_anchor=2)
    sets = positive_sets(city, train, attrs, config)
    batches = build_batches(city, sets, config)
    per_anchor = {}
    for batch in batches:
        per_anchor.setdefault(batch.anchor_id, []).append(batch.positive_id)
    for anchor, chosen in per_anchor.items():
        assert len(chosen) <= 2
        assert set(chosen) <= set(sets[anchor])
        assert chosen == sorted(chosen)


def test_build_batches_replacement_fallback(caplog):
    # 4 POIs, anchor 0 with positive 1: the pool is {2, 3} but the batch
    # needs 6 negatives, so the draw must fall back to replacement.
    ds = _square_city()
    sets = {0: {1: ("geography",)}}
    config = SamplerConfig(batch_size=8, seed=0)
    with caplog.at_level(logging.WARNING, logger="poienhance.sampling"):
        batches = build_batches(ds, sets, config)
    assert "replacement" in caplog.text
    (batch,) = batches
    assert len(batch.poi_ids) == 8
    assert set(batch.negative_ids) <= {2, 3}


def test_build_batches_empty_pool_fatal():
    # every other POI is a positive of the anchor: nothing left to deny
    ds = _square_city()
    sets = {0: {1: ("geography",), 2: ("geography",), 3: ("functional",)}}
    with pytest.raises(UserError, match="cannot draw negatives"):
        build_batches(ds, sets, SamplerConfig(batch_size=8, seed=0))


def test_build_batches_no_pairs_fatal():
    ds = _square_city()
    with pytest.raises(UserError, match="too sparse"):
        build_batches(ds, {}, SamplerConfig(batch_size=8))


def test_dump_batches_round_trip(tmp_path, city, splits, attrs):
    _, _, train = splits
    config = SamplerConfig(batch_size=6, seed=1, max_pairs_per_anchor=1)
    batches = build_batches(city, positive_sets(city, train, attrs, config), config)
    path = tmp_path / "batches.jsonl"
    dump_batches(batches, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(batches)
    for row, batch in zip(rows, batches):
        assert row["anchor"] == batch.anchor_id
        assert row["positive"] == batch.positive_id
        assert tuple(row["negatives"]) == batch.negative_ids
        assert tuple(row["sources"]) == batch.sources


def test_full_sampler_on_fresh_corpus():
    # end to end on an independently generated corpus with derived attributes
    city = synthetic_city(n_pois=40, n_categories=4, n_users=12, seed=33)
    attrs = derive_attributes(city, synthetic_geocoder(city), side_km=0.5)
    config = SamplerConfig(batch_size=6, seed=5)
    sets = positive_sets(city, city, attrs, config)
    batches = build_batches(city, sets, config)
    assert batches
    assert all(set(b.sources) <= set(STRATEGIES) for b in batches)
