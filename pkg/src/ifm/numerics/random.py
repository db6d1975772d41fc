"""Seeded counter-based randomness with explicit stream splitting.

Every consumer derives its own child stream by name, so adding a new
randomness consumer never perturbs existing streams. Streams are built on
numpy's Philox counter-based generator and are fully serializable.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ifm.errors import ParameterError


def _tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.blake2s(tag.encode("utf-8"), digest_size=4).digest(), "little")


class RngStream:
    """One independent random stream, splittable by string tag."""

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in _spawn_key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, tag: str) -> "RngStream":
        """A statistically independent stream derived from this one's identity."""
        return RngStream(self.seed, self.spawn_key + (_tag_hash(tag),))

    # -- draws ------------------------------------------------------------

    def normal(self, shape=(), mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        if sigma <= 0:
            raise ParameterError(f"normal sigma must be > 0, got {sigma}")
        return self._gen.normal(mu, sigma, size=shape).astype(np.float32)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def beta(self, alpha: float, beta: float, shape=()) -> np.ndarray:
        """Beta(alpha, beta) draws, clipped into the open interval (0, 1)."""
        if alpha <= 0 or beta <= 0:
            raise ParameterError(f"beta parameters must be > 0, got ({alpha}, {beta})")
        v = self._gen.beta(alpha, beta, size=shape)
        return np.clip(v, 1e-7, 1.0 - 1e-7).astype(np.float32)

    def logit_normal(self, mu: float = 0.0, sigma: float = 1.0, shape=()) -> np.ndarray:
        """sigmoid(Normal(mu, sigma)) draws, strictly inside (0, 1)."""
        if sigma <= 0:
            raise ParameterError(f"logit-normal sigma must be > 0, got {sigma}")
        z = self._gen.normal(mu, sigma, size=shape)
        v = 1.0 / (1.0 + np.exp(-z))
        return np.clip(v, 1e-7, 1.0 - 1e-7).astype(np.float32)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size=None, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # -- serialization -----------------------------------------------------

    def state_dict(self) -> dict:
        state = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "philox": _jsonable(state),
        }

    def load_state_dict(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.spawn_key = tuple(state["spawn_key"])
        self._gen.bit_generator.state = _from_jsonable(state["philox"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__nd__": obj.dtype.str, "values": obj.tolist()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__nd__" in obj:
            return np.asarray(obj["values"], dtype=np.dtype(obj["__nd__"]))
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
