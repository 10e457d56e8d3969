"""Embedding providers and the token-dilution simulator.

Three providers share one interface: `fixture` replays a JSON map of
precomputed vectors (tests, offline runs), `hashing` derives a vector
from character n-grams so any string embeds deterministically without a
model, and `remote` calls an HTTP service. All providers return float32
unit vectors and count how many texts they embedded, which lets audits
assert that certain operations (notably entity consolidation) never
touch the provider.

The dilution simulator is a Monte-Carlo model of why long passages lose
retrievability: a passage with n tokens of which m are relevant has a
query projection whose signal-to-noise ratio decays like 1/n.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyText,
    InvalidParams,
    IoError,
    RemoteUnavailable,
)

__all__ = [
    "ProviderConfig",
    "EmbeddingProvider",
    "FixtureProvider",
    "HashingProvider",
    "RemoteProvider",
    "make_provider",
    "cosine",
    "normalize",
    "simulate_dilution",
    "simulate_length_bias",
    "LengthBiasResult",
]

_NORM_TOL = 1e-5


@dataclass(frozen=True)
class ProviderConfig:
    """Configuration for building a provider by name."""

    kind: str = "hashing"
    dimension: int = 64
    seed: int = 0
    fixture_path: Optional[str] = None
    endpoint: Optional[str] = None
    auth_env: Optional[str] = None
    batch_size: int = 64
    timeout: float = 10.0
    max_retries: int = 2

    def __post_init__(self):
        if self.kind not in ("fixture", "hashing", "remote"):
            raise InvalidParams(f"unknown provider kind: {self.kind!r}")
        if self.dimension < 2:
            raise InvalidParams("dimension must be >= 2")
        if self.batch_size < 1 or self.max_retries < 0:
            raise InvalidParams("batch_size >= 1 and max_retries >= 0 required")


def normalize(vec: np.ndarray) -> np.ndarray:
    """Return vec scaled to unit L2 norm as float32."""
    v = np.asarray(vec, dtype=np.float32)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise InvalidParams("cannot normalize a zero vector")
    return (v / n).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise InvalidParams("cosine undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


class EmbeddingProvider:
    """Base provider: validates inputs, normalizes outputs, counts texts.

    Subclasses implement `_embed(texts) -> (n, d) array`; the base wraps
    it with empty-text checks and unit-norm enforcement.
    """

    def __init__(self, dimension: int):
        if dimension < 2:
            raise InvalidParams("dimension must be >= 2")
        self.dimension = dimension
        self.calls = 0
        self.texts_embedded = 0

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Embed a batch; returns an (n, dimension) float32 matrix."""
        texts = list(texts)
        for t in texts:
            if not t or not t.strip():
                raise EmptyText("cannot embed empty text")
        if not texts:
            return np.zeros((0, self.dimension), dtype=np.float32)
        self.calls += 1
        self.texts_embedded += len(texts)
        out = np.asarray(self._embed(texts), dtype=np.float32)
        if out.shape != (len(texts), self.dimension):
            raise DimensionMismatch(
                f"provider returned {out.shape}, expected {(len(texts), self.dimension)}"
            )
        norms = np.linalg.norm(out, axis=1)
        if np.any(norms == 0.0):
            raise InvalidParams("provider returned a zero vector")
        return (out / norms[:, None]).astype(np.float32)

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]


class FixtureProvider(EmbeddingProvider):
    """Replays vectors from an in-memory map or a JSON file.

    The JSON file maps text -> list[float]. Vectors are renormalized on
    load; a lookup miss is an error so tests fail loudly.
    """

    def __init__(self, vectors: Optional[dict] = None, path: Optional[str] = None,
                 dimension: Optional[int] = None):
        table = {}
        if path is not None:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    raw = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise IoError(f"cannot load fixture vectors from {path}: {exc}") from exc
            table.update(raw)
        if vectors:
            table.update(vectors)
        if not table:
            raise InvalidParams("fixture provider needs at least one vector")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise DimensionMismatch(f"fixture vectors have mixed dimensions: {sorted(dims)}")
        dim = dims.pop()
        if dimension is not None and dimension != dim:
            raise DimensionMismatch(f"fixture dimension {dim} != configured {dimension}")
        super().__init__(dim)
        self._table = {k: normalize(np.asarray(v, dtype=np.float32)) for k, v in table.items()}

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for t in texts:
            if t not in self._table:
                raise IoError(f"fixture provider has no vector for {t!r}")
            rows.append(self._table[t])
        return np.stack(rows)


class HashingProvider(EmbeddingProvider):
    """Deterministic char n-gram feature hashing.

    Lowercased 1..3-grams of the text are hashed into signed buckets and
    the bucket counts are normalized. Shared substrings give correlated
    vectors, which is enough structure for alias detection and coarse
    ranking without any model. Seed changes re-key every hash.
    """

    def __init__(self, dimension: int = 64, seed: int = 0, ngram_sizes: Tuple[int, ...] = (1, 2, 3)):
        super().__init__(dimension)
        if not ngram_sizes or any(n < 1 for n in ngram_sizes):
            raise InvalidParams("ngram_sizes must be positive")
        self.seed = seed
        self.ngram_sizes = tuple(ngram_sizes)
        self._key = int(seed).to_bytes(16, "little", signed=True)

    def _grams(self, text: str) -> Iterable[str]:
        t = " ".join(text.lower().split())
        for n in self.ngram_sizes:
            if len(t) < n:
                continue
            for i in range(len(t) - n + 1):
                yield t[i:i + n]

    def _vector(self, text: str) -> np.ndarray:
        acc = np.zeros(self.dimension, dtype=np.float64)
        for g in self._grams(text):
            h = int.from_bytes(
                hashlib.blake2b(g.encode("utf-8"), digest_size=8, key=self._key).digest(),
                "little",
            )
            bucket = h % self.dimension
            sign = 1.0 if (h >> 63) & 1 else -1.0
            acc[bucket] += sign
        if not np.any(acc):
            # degenerate input (all grams cancelled); fall back to a
            # single deterministic bucket so the vector stays usable
            h = int.from_bytes(
                hashlib.blake2b(text.encode("utf-8"), digest_size=8, key=self._key).digest(),
                "little",
            )
            acc[h % self.dimension] = 1.0
        return acc

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._vector(t) for t in texts])


class RemoteProvider(EmbeddingProvider):
    """HTTP provider: POST {"texts": [...]} -> {"vectors": [[...], ...]}.

    Retries transient failures (5xx, transport errors) with exponential
    backoff, then raises RemoteUnavailable carrying the last status.
    Responses are renormalized client-side; trust but verify.
    """

    def __init__(self, endpoint: str, dimension: int, auth_token: Optional[str] = None,
                 timeout: float = 10.0, max_retries: int = 2, batch_size: int = 64,
                 backoff: float = 0.1):
        super().__init__(dimension)
        if not endpoint:
            raise InvalidParams("remote provider needs an endpoint")
        self.endpoint = endpoint
        self.auth_token = auth_token
        self.timeout = timeout
        self.max_retries = max_retries
        self.batch_size = batch_size
        self.backoff = backoff

    def _post(self, batch: List[str]) -> np.ndarray:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        last_status = None
        last_err = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(self.endpoint, json={"texts": batch},
                                     headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_status, last_err = None, str(exc)
                continue
            if resp.status_code >= 500:
                last_status, last_err = resp.status_code, f"server error {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise RemoteUnavailable(
                    f"embedding service rejected request: {resp.status_code}",
                    status=resp.status_code,
                )
            try:
                vectors = resp.json()["vectors"]
            except (ValueError, KeyError) as exc:
                raise RemoteUnavailable(f"malformed embedding response: {exc}",
                                        status=resp.status_code) from exc
            arr = np.asarray(vectors, dtype=np.float32)
            if arr.shape != (len(batch), self.dimension):
                raise DimensionMismatch(
                    f"service returned {arr.shape}, expected {(len(batch), self.dimension)}"
                )
            return arr
        raise RemoteUnavailable(f"embedding service unavailable: {last_err}", status=last_status)

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        chunks = [self._post(list(texts[i:i + self.batch_size]))
                  for i in range(0, len(texts), self.batch_size)]
        return np.concatenate(chunks, axis=0)


def make_provider(config: ProviderConfig, auth_token: Optional[str] = None) -> EmbeddingProvider:
    """Build a provider from config; remote auth comes from the environment."""
    if config.kind == "fixture":
        return FixtureProvider(path=config.fixture_path, dimension=config.dimension)
    if config.kind == "hashing":
        return HashingProvider(dimension=config.dimension, seed=config.seed)
    if auth_token is None and config.auth_env:
        import os

        auth_token = os.environ.get(config.auth_env)
    return RemoteProvider(
        endpoint=config.endpoint or "",
        dimension=config.dimension,
        auth_token=auth_token,
        timeout=config.timeout,
        max_retries=config.max_retries,
        batch_size=config.batch_size,
    )


# --- token-dilution model ------------------------------------------------

@dataclass(frozen=True)
class LengthBiasResult:
    mean_short: float
    mean_long: float
    short_win_fraction: float


def _check_dilution_args(m: int, n_values: Sequence[int], sigma: float, trials: int):
    if m < 1:
        raise InvalidParams("m must be >= 1")
    if sigma < 0:
        raise InvalidParams("sigma must be >= 0")
    if trials < 1000:
        raise InvalidParams("trials must be >= 1000 for stable estimates")
    if not n_values:
        raise InvalidParams("n_values must be non-empty")
    if any(n < m for n in n_values):
        raise InvalidParams("every n must be >= m")


def simulate_dilution(m: int, n_values: Sequence[int], sigma: float,
                      trials: int = 10_000, seed: int = 0,
                      alpha: float = 1.0) -> List[Tuple[int, float]]:
    """Monte-Carlo SNR of the mean-pooled query projection vs passage length.

    Each synthetic passage has n token projections: m relevant ones
    contribute alpha plus noise, the rest contribute noise only, noise
    being N(0, sigma^2) per token. The passage score is the mean over
    tokens. Returns [(n, snr)] where snr = mean^2 / variance across
    trials; sigma == 0 yields inf (zero variance).
    """
    _check_dilution_args(m, n_values, sigma, trials)
    rng = np.random.default_rng(seed)
    out = []
    for n in n_values:
        noise = rng.normal(0.0, sigma, size=(trials, n)) if sigma > 0 else np.zeros((trials, n))
        scores = (m * alpha + noise.sum(axis=1)) / n
        mean = float(scores.mean())
        var = float(scores.var(ddof=1))
        snr = math.inf if var == 0.0 else mean * mean / var
        out.append((int(n), snr))
    return out


def simulate_length_bias(m: int, n_short: int, n_long: int, sigma: float,
                         trials: int = 1000, seed: int = 0,
                         alpha: float = 1.0) -> LengthBiasResult:
    """Paired trials: same m relevant tokens inside a short and a long passage.

    The relevant-token noise is shared within a pair so the comparison
    isolates dilution by irrelevant tokens. Returns the mean scores and
    the fraction of pairs where the short passage scored strictly higher.
    """
    _check_dilution_args(m, [n_short, n_long], sigma, trials)
    if not n_short < n_long:
        raise InvalidParams("n_short must be < n_long")
    rng = np.random.default_rng(seed)
    rel = m * alpha + (rng.normal(0.0, sigma, size=(trials, m)).sum(axis=1)
                       if sigma > 0 else np.zeros(trials))
    irr_short = (rng.normal(0.0, sigma, size=(trials, n_short - m)).sum(axis=1)
                 if sigma > 0 and n_short > m else np.zeros(trials))
    irr_long = (rng.normal(0.0, sigma, size=(trials, n_long - m)).sum(axis=1)
                if sigma > 0 and n_long > m else np.zeros(trials))
    short_scores = (rel + irr_short) / n_short
    long_scores = (rel + irr_long) / n_long
    return LengthBiasResult(
        mean_short=float(short_scores.mean()),
        mean_long=float(long_scores.mean()),
        short_win_fraction=float(np.mean(short_scores > long_scores)),
    )
