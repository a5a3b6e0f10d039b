"""Reverse-geocoding client: caching, retries, failure handling."""

import json

import pytest
import requests

from poienhance.geocode import (
    FixtureGeocoder,
    GeocodeClient,
    coordinate_key,
    parse_nominatim_address,
)

PAYLOAD = {
    "address": {
        "road": "Broadway",
        "house_number": "1500",
        "postcode": "10036",
        "city": "New York",
    }
}


class _FakeResponse:
    def __init__(self, status_code=200, payload=None):
        self.status_code = status_code
        self._payload = payload

    def json(self):
        if self._payload is None:
            raise ValueError("no body")
        return self._payload


class _FakeSession:
    """Scripted stand-in for requests.Session; records every call."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def get(self, url, params=None, timeout=None):
        self.calls.append((url, dict(params or {})))
        step = self.script.pop(0) if self.script else self.script_default
        if step == "network":
            raise requests.ConnectionError("scripted failure")
        return step

    script_default = _FakeResponse(200, PAYLOAD)


def test_coordinate_key_rounding():
    assert coordinate_key(40.75, -73.98) == "40.750000_-73.980000"
    assert coordinate_key(40.7500004, -73.98) == coordinate_key(40.75, -73.98)


def test_parse_nominatim_address_fields():
    addr = parse_nominatim_address(PAYLOAD)
    assert addr.street == "Broadway"
    assert addr.house_number == "1500"
    assert addr.postal_code == "10036"
    assert parse_nominatim_address({}).is_empty()
    # fallback street keys, most specific first
    alt = parse_nominatim_address({"address": {"pedestrian": "Plaza Walk"}})
    assert alt.street == "Plaza Walk"


def test_one_request_per_coordinate(tmp_path):
    session = _FakeSession([_FakeResponse(200, PAYLOAD)])
    client = GeocodeClient(tmp_path, rate_limit=0, session=session, email="a@b.c")
    first = client.reverse(40.75, -73.98)
    second = client.reverse(40.75, -73.98)
    assert first == second
    assert first.street == "Broadway"
    assert client.requests_made == 1
    assert len(session.calls) == 1
    _, params = session.calls[0]
    assert params["lat"] == "40.750000" and params["email"] == "a@b.c"


def test_persistent_cache_survives_new_client(tmp_path):
    session = _FakeSession([_FakeResponse(200, PAYLOAD)])
    GeocodeClient(tmp_path, rate_limit=0, session=session).reverse(40.75, -73.98)

    fresh_session = _FakeSession([])
    fresh = GeocodeClient(tmp_path, rate_limit=0, session=fresh_session)
    addr = fresh.reverse(40.75, -73.98)
    assert addr.street == "Broadway"
    assert fresh.requests_made == 0
    assert not fresh_session.calls


def test_http_client_error_yields_empty_and_is_cached(tmp_path):
    session = _FakeSession([_FakeResponse(404)])
    client = GeocodeClient(tmp_path, rate_limit=0, session=session)
    addr = client.reverse(1.0, 2.0)
    assert addr.is_empty()
    assert client.failures == 1
    assert client.requests_made == 1  # 4xx is not retried

    # The deterministic miss is persisted: a new client does not refetch.
    fresh = GeocodeClient(tmp_path, rate_limit=0, session=_FakeSession([]))
    assert fresh.reverse(1.0, 2.0).is_empty()
    assert fresh.requests_made == 0


def test_network_failure_retries_and_is_not_persisted(tmp_path):
    session = _FakeSession(["network"] * 3)
    client = GeocodeClient(tmp_path, rate_limit=0, retries=3, session=session)
    assert client.reverse(1.0, 2.0).is_empty()
    assert client.requests_made == 3
    # memoized within the run: no extra attempts on repeat
    assert client.reverse(1.0, 2.0).is_empty()
    assert client.requests_made == 3
    # but not written to disk: the next client tries again and succeeds
    retry = GeocodeClient(
        tmp_path, rate_limit=0, session=_FakeSession([_FakeResponse(200, PAYLOAD)])
    )
    assert retry.reverse(1.0, 2.0).street == "Broadway"


def test_server_error_then_success(tmp_path):
    session = _FakeSession([_FakeResponse(503), _FakeResponse(200, PAYLOAD)])
    client = GeocodeClient(tmp_path, rate_limit=0, retries=3, session=session)
    assert client.reverse(1.0, 2.0).street == "Broadway"
    assert client.requests_made == 2


def test_unparseable_body_counts_as_failure(tmp_path):
    session = _FakeSession([_FakeResponse(200, None), _FakeResponse(200, None)])
    client = GeocodeClient(tmp_path, rate_limit=0, retries=2, session=session)
    assert client.reverse(1.0, 2.0).is_empty()
    assert client.requests_made == 2


def test_corrupt_cache_entry_refetched(tmp_path):
    session = _FakeSession([_FakeResponse(200, PAYLOAD)])
    client = GeocodeClient(tmp_path, rate_limit=0, session=session)
    client.reverse(40.75, -73.98)
    cache_file = tmp_path / (coordinate_key(40.75, -73.98) + ".json")
    assert json.loads(cache_file.read_text())["address"]["road"] == "Broadway"
    cache_file.write_text("{ not json", encoding="utf-8")

    fresh = GeocodeClient(
        tmp_path, rate_limit=0, session=_FakeSession([_FakeResponse(200, PAYLOAD)])
    )
    assert fresh.reverse(40.75, -73.98).street == "Broadway"
    assert fresh.requests_made == 1


def test_fixture_geocoder_known_and_unknown():
    fixtures = {coordinate_key(40.75, -73.98): PAYLOAD}
    geo = FixtureGeocoder(fixtures)
    assert geo.reverse(40.75, -73.98).street == "Broadway"
    assert geo.reverse(0.0, 0.0).is_empty()
    assert geo.calls == 2
