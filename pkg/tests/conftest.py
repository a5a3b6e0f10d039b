"""Shared fixtures: one small synthetic corpus reused across the suite."""

import numpy as np
import pytest

from poienhance.attributes import derive_attributes
from poienhance.backends import StructuredMockBackend
from poienhance.corpus import split_sequences
from poienhance.features import bundles_to_arrays, extract_corpus
from poienhance.model import HyperParams
from poienhance.prompts import generate_corpus_prompts
from poienhance.synthetic import random_embeddings, synthetic_city, synthetic_geocoder

FEATURE_DIM = 48
BASE_DIM = 32


@pytest.fixture(scope="session")
def city():
    # 60 POIs over 5 clustered categories; every POI gets 8 visits so the
    # corpus already satisfies the default filters.
    return synthetic_city(
        n_pois=60, n_categories=5, n_users=20, visits_per_poi=8, seed=7
    )


@pytest.fixture(scope="session")
def splits(city):
    return split_sequences(city, ratios=(2, 1, 7), seed=0)


@pytest.fixture(scope="session")
def attrs(city):
    return derive_attributes(city, synthetic_geocoder(city, seed=1), side_km=0.5)


@pytest.fixture(scope="session")
def backend():
    return StructuredMockBackend(dim=FEATURE_DIM, seed=0)


@pytest.fixture(scope="session")
def bundles(city, attrs, backend, tmp_path_factory):
    prompts = generate_corpus_prompts(city, attrs)
    cache = tmp_path_factory.mktemp("shared_feature_cache")
    out, missing = extract_corpus(prompts, backend, cache)
    assert not missing
    return out


@pytest.fixture(scope="session")
def base_emb(city):
    return random_embeddings(city, dim=BASE_DIM, seed=3)


@pytest.fixture(scope="session")
def feature_block(city, bundles, base_emb):
    """The four-matrix dict form used by the estimator and training loops."""
    ids = city.poi_ids()
    visit, address, surrounding = bundles_to_arrays(bundles, ids)
    return {
        "visit": visit,
        "address": address,
        "surrounding": surrounding,
        "base": base_emb.matrix.copy(),
    }


@pytest.fixture()
def small_hp():
    return HyperParams(
        dim=16,
        latent_dim=8,
        heads=2,
        head_dim=8,
        align_layers=2,
        fuse_layers=1,
        feature_dim=FEATURE_DIM,
        ffn_mult=2,
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
