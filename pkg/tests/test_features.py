"""Feature extraction, the on-disk vector cache, and the mock backends."""

import numpy as np
import pytest

from poienhance.backends import MockBackend, StructuredMockBackend, build_backend
from poienhance.errors import UserError
from poienhance.features import (
    FeatureCache,
    bundles_to_arrays,
    cache_key,
    extract_corpus,
    extract_feature,
    prompt_digest,
)
from poienhance.prompts import Prompt, PromptKind, generate_corpus_prompts


def _prompt(text="hello", kind=PromptKind.ADDRESS, pid=1, version="v1"):
    return Prompt(poi_id=pid, kind=kind, text=text, template_version=version)


class _CountingBackend:
    """Wraps a backend and counts hidden() calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    @property
    def descriptor(self):
        return self.inner.descriptor

    def hidden(self, text):
        self.calls += 1
        return self.inner.hidden(text)


class _BrokenBackend:
    def __init__(self, inner, fail_substring):
        self.inner = inner
        self.fail_substring = fail_substring

    @property
    def descriptor(self):
        return self.inner.descriptor

    def hidden(self, text):
        if self.fail_substring in text:
            raise RuntimeError("backend exploded")
        return self.inner.hidden(text)


def test_mock_backend_deterministic_unit_vectors():
    backend = MockBackend(dim=32, seed=5)
    a = backend.hidden("some text")
    b = backend.hidden("some text")
    c = backend.hidden("other text")
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-5)
    assert a.dtype == np.float32
    # seed participates in the output and in the backend id
    other = MockBackend(dim=32, seed=6)
    assert not np.array_equal(a, other.hidden("some text"))
    assert backend.descriptor.backend_id != other.descriptor.backend_id


def test_structured_mock_groups_categories():
    backend = StructuredMockBackend(dim=32, seed=0)
    same_a = backend.hidden("Name: A\nCategory: Restaurant\nmore")
    same_b = backend.hidden("Name: B\nCategory: Restaurant\nother")
    diff = backend.hidden("Name: C\nCategory: Museum\nother")

    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    assert cos(same_a, same_b) > 0.8
    assert cos(same_a, diff) < 0.5


def test_build_backend_dispatch():
    assert build_backend("mock", dim=16, seed=0).descriptor.dim == 16
    assert isinstance(build_backend("structured-mock", dim=16), StructuredMockBackend)
    with pytest.raises(UserError):
        build_backend("no-such-backend", dim=16)
    with pytest.raises(UserError, match="endpoint"):
        build_backend("http", dim=16)


def test_extract_feature_validates_shape():
    class _Lying:
        descriptor = MockBackend(dim=8).descriptor

        def hidden(self, text):
            return np.zeros(4, dtype=np.float32)

    with pytest.raises(UserError, match="declared dim"):
        extract_feature(_prompt(), _Lying())


def test_prompt_digest_sensitivity():
    base = _prompt()
    assert prompt_digest(base) == prompt_digest(_prompt())
    assert prompt_digest(base) != prompt_digest(_prompt(text="hello!"))
    assert prompt_digest(base) != prompt_digest(_prompt(kind=PromptKind.SURROUNDING))
    assert prompt_digest(base) != prompt_digest(_prompt(version="v2"))
    # backend id prefixes the cache key
    assert cache_key("b1", base) != cache_key("b2", base)


def test_cache_round_trip_bit_exact(tmp_path, rng):
    cache = FeatureCache(tmp_path)
    vec = rng.standard_normal(17).astype(np.float32)
    cache.put("k1", vec, "backend")
    out = cache.get("k1")
    np.testing.assert_array_equal(out, vec)
    assert out.dtype == np.float32
    assert cache.get("nope") is None
    # a fresh instance reads the same bytes back from disk
    again = FeatureCache(tmp_path)
    np.testing.assert_array_equal(again.get("k1"), vec)
    assert "k1" in again and len(again) == 1


def test_cache_detects_corruption(tmp_path, rng):
    cache = FeatureCache(tmp_path)
    vec = rng.standard_normal(8).astype(np.float32)
    cache.put("k1", vec, "backend")
    (vec_file,) = list(tmp_path.glob("*.vec"))
    blob = bytearray(vec_file.read_bytes())
    blob[-1] ^= 0xFF  # flip one payload byte
    vec_file.write_bytes(bytes(blob))
    assert FeatureCache(tmp_path).get("k1") is None

    cache.put("k2", vec, "backend")
    (other,) = [p for p in tmp_path.glob("*.vec") if p != vec_file]
    other.write_bytes(b"XX")  # truncated: bad magic
    assert FeatureCache(tmp_path).get("k2") is None


def test_extract_corpus_uses_cache_on_second_run(tmp_path, city, attrs):
    prompts = generate_corpus_prompts(city, attrs)
    backend = _CountingBackend(StructuredMockBackend(dim=24, seed=1))
    cache_dir = tmp_path / "cache"

    bundles1, missing1 = extract_corpus(prompts, backend, cache_dir)
    assert not missing1
    assert backend.calls == len(prompts)

    bundles2, missing2 = extract_corpus(prompts, backend, cache_dir)
    assert not missing2
    assert backend.calls == len(prompts)  # all hits, no new backend work
    for pid in bundles1:
        np.testing.assert_array_equal(
            bundles1[pid].e_visit.values, bundles2[pid].e_visit.values
        )
        np.testing.assert_array_equal(
            bundles1[pid].e_address.values, bundles2[pid].e_address.values
        )
        np.testing.assert_array_equal(
            bundles1[pid].e_surrounding.values, bundles2[pid].e_surrounding.values
        )


def test_extract_corpus_threaded_matches_single(tmp_path, city, attrs):
    prompts = generate_corpus_prompts(city, attrs)
    backend = StructuredMockBackend(dim=24, seed=1)
    single, m1 = extract_corpus(prompts, backend, tmp_path / "c1", max_workers=1)
    threaded, m2 = extract_corpus(prompts, backend, tmp_path / "c2", max_workers=4)
    assert not m1 and not m2
    assert sorted(single) == sorted(threaded)
    for pid in single:
        np.testing.assert_array_equal(
            single[pid].e_address.values, threaded[pid].e_address.values
        )


def test_extract_corpus_records_failures(tmp_path, city, attrs):
    prompts = generate_corpus_prompts(city, attrs)
    victim = city.poi_ids()[0]
    backend = _BrokenBackend(
        StructuredMockBackend(dim=24, seed=1), fail_substring=f"Name: Venue {victim}\n"
    )
    bundles, missing = extract_corpus(prompts, backend, tmp_path / "cache")
    assert victim not in bundles
    assert len(bundles) == city.n_pois - 1
    failed = {(pid, kind) for pid, kind, _reason in missing}
    assert failed == {(victim, k.value) for k in PromptKind}


def test_extract_corpus_flags_missing_prompt_kind(tmp_path, city, attrs):
    prompts = generate_corpus_prompts(city, attrs)
    victim = city.poi_ids()[3]
    pruned = [
        p
        for p in prompts
        if not (p.poi_id == victim and p.kind is PromptKind.SURROUNDING)
    ]
    backend = StructuredMockBackend(dim=24, seed=1)
    bundles, missing = extract_corpus(pruned, backend, tmp_path / "cache")
    assert victim not in bundles
    assert (victim, "surrounding", "prompt not provided") in missing


def test_template_version_invalidates_cache(tmp_path):
    backend = _CountingBackend(MockBackend(dim=8, seed=0))
    p_v1 = [_prompt(text="t", version="v1")]
    p_v2 = [_prompt(text="t", version="v2")]
    extract_corpus(p_v1 * 1, backend, tmp_path, max_workers=1)
    # incomplete bundle (only one kind) is fine here; we only count calls
    calls_after_v1 = backend.calls
    extract_corpus(p_v2, backend, tmp_path, max_workers=1)
    assert backend.calls == calls_after_v1 + 1


def test_bundles_to_arrays_shape_and_order(city, bundles):
    ids = city.poi_ids()
    e_v, e_a, e_s = bundles_to_arrays(bundles, ids)
    assert e_v.shape == e_a.shape == e_s.shape == (len(ids), bundles[ids[0]].dim)
    assert e_v.dtype == np.float32
    np.testing.assert_array_equal(e_v[4], bundles[ids[4]].e_visit.values)
    with pytest.raises(UserError, match="missing feature bundles"):
        bundles_to_arrays(bundles, ids + [10_000])
