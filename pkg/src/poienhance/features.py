"""Per-POI semantic feature vectors with a persistent binary cache.

Cache layout under ``cache_dir``:

* ``index.jsonl`` -- one record per vector: cache key, relative payload path,
  dimension, backend id, and a sha256 of the float payload for corruption
  detection.
* ``<digest>.vec`` -- 8-byte magic, 4-byte little-endian dimension, then
  ``dim`` little-endian float32 values.

The cache key is the backend id combined with a digest of
``kind || template_version || text``, so either a template edit or a backend
change invalidates exactly the affected entries.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UserError
from .prompts import Prompt, PromptKind

logger = logging.getLogger(__name__)

MAGIC = b"POIFEAT\x01"


def prompt_digest(prompt: Prompt) -> str:
    payload = "\x1f".join((prompt.kind.value, prompt.template_version, prompt.text))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def cache_key(backend_id: str, prompt: Prompt) -> str:
    return f"{backend_id}:{prompt_digest(prompt)}"


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray  # float32, shape (dim,)
    backend_id: str
    prompt_digest: str

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("feature vector must be 1-D")
        if not np.isfinite(self.values).all():
            raise ValueError("feature vector contains non-finite entries")


@dataclass(frozen=True)
class FeatureBundle:
    """The three semantic vectors of one POI (visit / address / surrounding)."""

    poi_id: int
    e_visit: FeatureVector
    e_address: FeatureVector
    e_surrounding: FeatureVector

    def __post_init__(self):
        vecs = (self.e_visit, self.e_address, self.e_surrounding)
        if len({v.backend_id for v in vecs}) != 1:
            raise ValueError(f"poi {self.poi_id}: mixed backends in bundle")
        if len({v.values.shape for v in vecs}) != 1:
            raise ValueError(f"poi {self.poi_id}: mixed dimensions in bundle")

    @property
    def dim(self) -> int:
        return int(self.e_visit.values.shape[0])


def extract_feature(prompt: Prompt, backend) -> FeatureVector:
    """Run one prompt through the (frozen) backend."""
    values = np.asarray(backend.hidden(prompt.text), dtype=np.float32)
    desc = backend.descriptor
    if values.shape != (desc.dim,):
        raise UserError(
            f"backend {desc.backend_id} returned shape {values.shape}, "
            f"declared dim {desc.dim}"
        )
    return FeatureVector(
        values=values, backend_id=desc.backend_id, prompt_digest=prompt_digest(prompt)
    )


class FeatureCache:
    """Append-only on-disk vector cache with integrity checking."""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.index_path = self.cache_dir / "index.jsonl"
        self._index: dict[str, dict] = {}
        if self.index_path.is_file():
            with self.index_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._index[row["key"]] = row

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def get(self, key: str) -> np.ndarray | None:
        """Read a cached vector; corrupted entries are dropped, not returned."""
        row = self._index.get(key)
        if row is None:
            return None
        path = self.cache_dir / row["path"]
        try:
            blob = path.read_bytes()
            if blob[:8] != MAGIC:
                raise ValueError("bad magic")
            (dim,) = struct.unpack("<I", blob[8:12])
            payload = blob[12 : 12 + 4 * dim]
            if dim != row["dim"] or len(payload) != 4 * dim:
                raise ValueError("dimension mismatch")
            if hashlib.sha256(payload).hexdigest() != row["payload_sha"]:
                raise ValueError("payload digest mismatch")
        except (OSError, ValueError, struct.error) as exc:
            logger.warning("cache entry %s corrupt (%s); discarding", key, exc)
            del self._index[key]
            return None
        return np.frombuffer(payload, dtype="<f4").copy()

    def put(self, key: str, values: np.ndarray, backend_id: str) -> None:
        values = np.ascontiguousarray(values, dtype="<f4")
        payload = values.tobytes()
        rel = hashlib.sha256(key.encode("utf-8")).hexdigest()[:24] + ".vec"
        path = self.cache_dir / rel
        tmp = path.with_suffix(".tmp")
        with tmp.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", values.shape[0]))
            fh.write(payload)
        os.replace(tmp, path)
        row = {
            "key": key,
            "path": rel,
            "dim": int(values.shape[0]),
            "backend_id": backend_id,
            "payload_sha": hashlib.sha256(payload).hexdigest(),
        }
        with self.index_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")
        self._index[key] = row


_KIND_TO_FIELD = {
    PromptKind.VISIT_PATTERN: "e_visit",
    PromptKind.ADDRESS: "e_address",
    PromptKind.SURROUNDING: "e_surrounding",
}


def extract_corpus(
    prompts: list[Prompt], backend, cache_dir, max_workers: int = 1
) -> tuple[dict[int, FeatureBundle], list[tuple[int, str, str]]]:
    """Extract features for all prompts, reusing the cache where possible.

    Returns the complete bundles keyed by poi id plus an explicit missing
    list of ``(poi_id, kind, reason)`` for prompts that failed or whose POI
    ended up without all three vectors. Backend calls for uncached prompts
    may fan out over ``max_workers`` threads; the result map is assembled
    single-threaded.
    """
    cache = FeatureCache(cache_dir)
    desc = backend.descriptor
    vectors: dict[tuple[int, PromptKind], FeatureVector] = {}
    missing: list[tuple[int, str, str]] = []
    uncached: list[Prompt] = []

    for prompt in prompts:
        cached = cache.get(cache_key(desc.backend_id, prompt))
        if cached is not None:
            vectors[(prompt.poi_id, prompt.kind)] = FeatureVector(
                values=cached,
                backend_id=desc.backend_id,
                prompt_digest=prompt_digest(prompt),
            )
        else:
            uncached.append(prompt)

    def _run(prompt: Prompt):
        return prompt, extract_feature(prompt, backend)

    if uncached:
        logger.info(
            "extracting %d/%d prompts (%d cached)",
            len(uncached),
            len(prompts),
            len(prompts) - len(uncached),
        )
    if max_workers > 1 and len(uncached) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = []
            for prompt in uncached:
                results.append(pool.submit(_run, prompt))
            outcomes = []
            for fut in results:
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # recorded per prompt, run continues
                    outcomes.append(exc)
    else:
        outcomes = []
        for prompt in uncached:
            try:
                outcomes.append(_run(prompt))
            except Exception as exc:
                outcomes.append(exc)

    for prompt, outcome in zip(uncached, outcomes):
        if isinstance(outcome, Exception):
            logger.error(
                "extraction failed for poi %d %s: %s",
                prompt.poi_id,
                prompt.kind.value,
                outcome,
            )
            missing.append((prompt.poi_id, prompt.kind.value, str(outcome)))
            continue
        _, vec = outcome
        cache.put(cache_key(desc.backend_id, prompt), vec.values, desc.backend_id)
        vectors[(prompt.poi_id, prompt.kind)] = vec

    bundles: dict[int, FeatureBundle] = {}
    for pid in sorted({p.poi_id for p in prompts}):
        parts = {}
        complete = True
        for kind, fieldname in _KIND_TO_FIELD.items():
            vec = vectors.get((pid, kind))
            if vec is None:
                if not any(m[0] == pid and m[1] == kind.value for m in missing):
                    missing.append((pid, kind.value, "prompt not provided"))
                complete = False
            else:
                parts[fieldname] = vec
        if complete:
            bundles[pid] = FeatureBundle(poi_id=pid, **parts)
    return bundles, missing


def bundles_to_arrays(
    bundles: dict[int, FeatureBundle], poi_ids: list[int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack bundles into three (n, dim) float32 arrays in ``poi_ids`` order."""
    missing = [pid for pid in poi_ids if pid not in bundles]
    if missing:
        raise UserError(f"missing feature bundles for {len(missing)} POIs: {missing[:5]}")
    e_v = np.stack([bundles[p].e_visit.values for p in poi_ids])
    e_a = np.stack([bundles[p].e_address.values for p in poi_ids])
    e_s = np.stack([bundles[p].e_surrounding.values for p in poi_ids])
    return e_v, e_a, e_s
