"""Reverse geocoding against a Nominatim-compatible endpoint.

Responses are cached permanently on disk (one JSON file per rounded
coordinate) so a corpus only ever costs one request per distinct location and
later runs work fully offline. Network calls are serialized behind a rate
limiter; cache writes are atomic write-rename.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from pathlib import Path

import requests

from .attributes import Address

logger = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "https://nominatim.openstreetmap.org/reverse"

# address keys tried for the street name, most specific first
_STREET_KEYS = ("road", "pedestrian", "footway", "street", "residential")


def coordinate_key(lat: float, lon: float) -> str:
    """Cache key: both coordinates rounded to 6 decimals."""
    return f"{lat:.6f}_{lon:.6f}"


def parse_nominatim_address(payload: dict) -> Address:
    """Pull street / house number / postal code out of a reverse response."""
    addr = payload.get("address") or {}
    street = next((addr[k] for k in _STREET_KEYS if k in addr), None)
    return Address(
        street=street,
        house_number=addr.get("house_number"),
        postal_code=addr.get("postcode"),
    )


class _RateLimiter:
    """Serializes callers and enforces a minimum interval between calls."""

    def __init__(self, per_second: float):
        self._interval = 1.0 / per_second if per_second > 0 else 0.0
        self._lock = threading.Lock()
        self._last = 0.0

    def wait(self):
        with self._lock:
            now = time.monotonic()
            delay = self._last + self._interval - now
            if delay > 0:
                time.sleep(delay)
            self._last = time.monotonic()


class GeocodeClient:
    """Cached reverse-geocoding client.

    Parameters
    ----------
    cache_dir : directory for persisted responses (created on demand).
    endpoint : Nominatim-compatible ``/reverse`` URL.
    email : contact address sent with each request, per Nominatim policy.
    rate_limit : maximum requests per second (default 1).
    retries : attempts per request before giving up.
    """

    def __init__(
        self,
        cache_dir,
        endpoint: str = DEFAULT_ENDPOINT,
        email: str = "",
        rate_limit: float = 1.0,
        retries: int = 3,
        session=None,
    ):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.endpoint = endpoint
        self.email = email
        self.retries = retries
        self._limiter = _RateLimiter(rate_limit)
        self._session = session or requests.Session()
        self._memo: dict[str, Address] = {}
        self.requests_made = 0
        self.failures = 0

    def reverse(self, lat: float, lon: float) -> Address:
        """Reverse geocode, hitting the network at most once per coordinate.

        On network failure or an HTTP error the returned address has all
        fields absent and the pipeline carries on; the two failure kinds are
        logged distinctly.
        """
        key = coordinate_key(lat, lon)
        if key in self._memo:
            return self._memo[key]
        cached = self._read_cache(key)
        if cached is not None:
            self._memo[key] = cached
            return cached

        payload, kind = self._fetch(lat, lon)
        if payload is None:
            self.failures += 1
            address = Address()
            if kind == "http":
                logger.warning("geocode %s: HTTP client error, address left empty", key)
                # 4xx responses are deterministic; cache the miss.
                self._write_cache(key, {"error": "http"})
            else:
                logger.warning("geocode %s: network failure, address left empty", key)
        else:
            address = parse_nominatim_address(payload)
            self._write_cache(key, payload)
        self._memo[key] = address
        return address

    def _fetch(self, lat: float, lon: float):
        params = {"lat": f"{lat:.6f}", "lon": f"{lon:.6f}", "format": "jsonv2"}
        if self.email:
            params["email"] = self.email
        last_kind = "network"
        for attempt in range(self.retries):
            self._limiter.wait()
            self.requests_made += 1
            try:
                resp = self._session.get(self.endpoint, params=params, timeout=10)
            except requests.RequestException as exc:
                logger.debug("geocode attempt %d failed: %s", attempt + 1, exc)
                last_kind = "network"
                continue
            if 400 <= resp.status_code < 500:
                return None, "http"
            if resp.status_code != 200:
                last_kind = "network"
                continue
            try:
                return resp.json(), "ok"
            except ValueError:
                last_kind = "network"
        return None, last_kind

    def _cache_path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def _read_cache(self, key: str) -> Address | None:
        path = self._cache_path(key)
        if not path.is_file():
            return None
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            logger.warning("unreadable geocode cache entry %s; refetching", path)
            return None
        if payload.get("error"):
            return Address()
        return parse_nominatim_address(payload)

    def _write_cache(self, key: str, payload: dict) -> None:
        path = self._cache_path(key)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, path)


class FixtureGeocoder:
    """Offline geocoder backed by a fixed mapping; the test/demo stand-in.

    ``fixtures`` maps :func:`coordinate_key` strings to raw Nominatim-style
    payload dicts. Unknown coordinates yield an all-absent address.
    """

    def __init__(self, fixtures: dict[str, dict] | None = None):
        self.fixtures = fixtures or {}
        self.calls = 0

    def reverse(self, lat: float, lon: float) -> Address:
        self.calls += 1
        payload = self.fixtures.get(coordinate_key(lat, lon))
        if payload is None:
            return Address()
        return parse_nominatim_address(payload)
