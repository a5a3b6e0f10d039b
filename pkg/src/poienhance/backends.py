"""Feature-extraction backends: frozen language models and their stand-ins.

A backend turns prompt text into a fixed-size hidden-state vector. The two
mock backends are first-class citizens, not test shims: they make the whole
pipeline runnable and exactly reproducible without any model weights. The
remote backend speaks a minimal HTTP protocol (POST ``{"text": ...}`` ->
``{"hidden": [...]}``); the local backend wraps a transformers model and is
imported lazily so the package works without that dependency stack loaded.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass

import numpy as np

from .errors import UserError

logger = logging.getLogger(__name__)

POOLING_MODES = ("last", "mean")


@dataclass(frozen=True)
class BackendDescriptor:
    """Identity and shape of a feature backend.

    ``backend_id`` participates in every cache key, so two backends that
    could produce different vectors must never share an id. The pooling mode
    is therefore folded into the id.
    """

    backend_id: str
    dim: int
    pooling: str = "last"

    def __post_init__(self):
        if self.dim <= 0:
            raise UserError("backend dim must be positive")
        if self.pooling not in POOLING_MODES:
            raise UserError(f"pooling must be one of {POOLING_MODES}")


def _seeded_rng(*parts: str) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class MockBackend:
    """Deterministic pseudo-LLM: a pure function of (prompt text, seed)."""

    def __init__(self, dim: int = 64, seed: int = 0, pooling: str = "last"):
        self.descriptor = BackendDescriptor(
            backend_id=f"mock-d{dim}-s{seed}-{pooling}", dim=dim, pooling=pooling
        )
        self.seed = seed

    def hidden(self, text: str) -> np.ndarray:
        rng = _seeded_rng("mock", str(self.seed), self.descriptor.pooling, text)
        vec = rng.standard_normal(self.descriptor.dim)
        vec /= np.linalg.norm(vec)
        return vec.astype(np.float32)


_CATEGORY_LINE = re.compile(r"^Category: (.*)$", re.MULTILINE)


class StructuredMockBackend:
    """Mock whose output carries the POI's category as structure.

    The vector is a unit one-hot at a hash-derived category index plus small
    text-hash noise, so prompts about same-category POIs land close together
    in cosine space. Useful for synthetic end-to-end experiments.
    """

    def __init__(
        self, dim: int = 64, seed: int = 0, noise: float = 0.05, pooling: str = "last"
    ):
        self.descriptor = BackendDescriptor(
            backend_id=f"structmock-d{dim}-s{seed}-n{noise}-{pooling}",
            dim=dim,
            pooling=pooling,
        )
        self.seed = seed
        self.noise = noise

    def category_index(self, category: str) -> int:
        digest = hashlib.sha256(category.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little") % self.descriptor.dim

    def hidden(self, text: str) -> np.ndarray:
        vec = np.zeros(self.descriptor.dim)
        match = _CATEGORY_LINE.search(text)
        if match:
            vec[self.category_index(match.group(1))] = 1.0
        rng = _seeded_rng("structmock", str(self.seed), text)
        vec += self.noise * rng.standard_normal(self.descriptor.dim)
        return vec.astype(np.float32)


class HttpBackend:
    """Remote backend: POST ``{"text": ...}`` and read ``{"hidden": [...]}``."""

    def __init__(
        self,
        endpoint: str,
        dim: int,
        backend_id: str | None = None,
        pooling: str = "last",
        retries: int = 3,
        session=None,
    ):
        import requests

        self.endpoint = endpoint
        self.descriptor = BackendDescriptor(
            backend_id=backend_id or f"http-{endpoint}-{pooling}",
            dim=dim,
            pooling=pooling,
        )
        self.retries = retries
        self._session = session or requests.Session()

    def hidden(self, text: str) -> np.ndarray:
        import requests

        last_err: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self._session.post(
                    self.endpoint,
                    json={"text": text, "pooling": self.descriptor.pooling},
                    timeout=60,
                )
                resp.raise_for_status()
                hidden = np.asarray(resp.json()["hidden"], dtype=np.float32)
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_err = exc
                logger.debug("backend attempt %d failed: %s", attempt + 1, exc)
                continue
            if hidden.shape != (self.descriptor.dim,):
                raise UserError(
                    f"backend returned {hidden.shape}, expected ({self.descriptor.dim},)"
                )
            return hidden
        raise RuntimeError(f"backend failed after {self.retries} attempts: {last_err}")


class TransformersBackend:
    """Local frozen model via transformers; the model never receives gradients.

    Prompts longer than the model context are hard-truncated with a warning.
    """

    def __init__(self, model_path: str, pooling: str = "last", device: str = "cpu"):
        # Imported here so the rest of the package has no hard dependency.
        import torch
        from transformers import AutoModel, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_path)
        self.model = AutoModel.from_pretrained(model_path).to(device).eval()
        for param in self.model.parameters():
            param.requires_grad_(False)
        self.device = device
        dim = int(self.model.config.hidden_size)
        self.descriptor = BackendDescriptor(
            backend_id=f"hf-{model_path}-{pooling}", dim=dim, pooling=pooling
        )

    def hidden(self, text: str) -> np.ndarray:
        torch = self._torch
        enc = self.tokenizer(
            text, return_tensors="pt", truncation=True, return_overflowing_tokens=False
        )
        max_len = getattr(self.tokenizer, "model_max_length", None)
        if max_len and enc["input_ids"].shape[1] >= max_len:
            logger.warning("prompt truncated to %d tokens", max_len)
        enc = {k: v.to(self.device) for k, v in enc.items() if hasattr(v, "to")}
        with torch.no_grad():
            out = self.model(**enc)
        states = out.last_hidden_state[0]
        if self.descriptor.pooling == "mean":
            pooled = states.mean(dim=0)
        else:
            pooled = states[-1]
        return pooled.to(torch.float32).cpu().numpy()


def build_backend(
    kind: str,
    dim: int,
    seed: int = 0,
    pooling: str = "last",
    endpoint: str = "",
    model_path: str = "",
):
    """Construct a backend from flat config values."""
    if kind == "mock":
        return MockBackend(dim=dim, seed=seed, pooling=pooling)
    if kind == "structured-mock":
        return StructuredMockBackend(dim=dim, seed=seed, pooling=pooling)
    if kind == "http":
        if not endpoint:
            raise UserError("http backend requires backend_endpoint")
        return HttpBackend(endpoint=endpoint, dim=dim, pooling=pooling)
    if kind == "transformers":
        if not model_path:
            raise UserError("transformers backend requires backend_model_path")
        return TransformersBackend(model_path=model_path, pooling=pooling)
    raise UserError(f"unknown backend kind: {kind!r}")
