"""Typing environment: belief-driven query sampling, response draws, and
response pools (synthetic generation plus on-disk manifest+blob datasets).

A query of K unique symbols is drawn sequentially without replacement, each
draw proportional to the floored belief restricted to the symbols not yet
drawn. ``query_log_prob`` returns exactly the log-probability of the ordered
draw and has a hand-written gradient w.r.t. the belief, which is what the
policy-gradient trainer differentiates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError

# Belief entries are clamped to at least this value before query sampling so
# a degenerate posterior can still produce K distinct symbols.
QUERY_PROB_FLOOR = 1e-6

POOL_MANIFEST = "manifest.json"

_MANIFEST_KEYS = (
    "channels",
    "samples",
    "count_target",
    "count_nontarget",
    "dtype",
    "target_file",
    "nontarget_file",
)


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent, reproducible stream for (seed, key) pairs."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def require_belief(p: np.ndarray, tol: float = 1e-6) -> None:
    p = np.asarray(p)
    if p.ndim != 1:
        raise ValueError(f"belief must be a vector, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("belief has negative entries")
    if abs(float(p.sum()) - 1.0) > tol:
        raise ValueError(f"belief sums to {float(p.sum())}, not 1")


def _floored(belief) -> np.ndarray:
    m = np.asarray(belief, dtype=np.float64)
    return np.maximum(m, QUERY_PROB_FLOOR)


def sample_query(belief, query_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an ordered query of ``query_size`` unique symbol indices.

    Uses the Gumbel-top-k construction, which realizes exactly the sequential
    without-replacement draw proportional to the floored, renormalized belief.
    """
    return sample_queries(np.asarray(belief)[None, :], query_size, rng)[0]


def sample_queries(beliefs: np.ndarray, query_size: int, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`sample_query`: (B, A) beliefs -> (B, K) queries."""
    beliefs = np.asarray(beliefs)
    n_rows, alphabet = beliefs.shape
    if query_size > alphabet:
        raise ConfigurationError(
            f"query size {query_size} exceeds alphabet size {alphabet}"
        )
    if query_size < 1:
        raise ConfigurationError(f"query size must be >= 1, got {query_size}")
    keys = np.log(_floored(beliefs)) + rng.gumbel(size=beliefs.shape)
    order = np.argsort(-keys, axis=1, kind="stable")
    return order[:, :query_size].astype(np.int64)


def _check_query(query: np.ndarray, alphabet: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.int64)
    if q.ndim != 1:
        raise ValueError(f"query must be a vector, got shape {q.shape}")
    if len(np.unique(q)) != q.size:
        raise ValueError(f"query contains repeated symbols: {q.tolist()}")
    if q.size and (q.min() < 0 or q.max() >= alphabet):
        raise ValueError(f"query symbol out of range 0..{alphabet - 1}: {q.tolist()}")
    return q


def query_log_prob(belief, query) -> float:
    """Log-probability of ``query`` as an ordered without-replacement draw."""
    belief = np.asarray(belief)
    q = _check_query(query, belief.shape[-1])
    return float(query_log_probs(belief[None, :], q[None, :])[0])


def query_log_probs(beliefs: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Batched log-probabilities: (B, A) x (B, K) -> (B,) float64."""
    m = _floored(beliefs)
    total = m.sum(axis=1, keepdims=True)
    mq = np.take_along_axis(m, queries, axis=1)
    drawn_before = np.cumsum(mq, axis=1) - mq
    denom = total - drawn_before
    return (np.log(mq) - np.log(denom)).sum(axis=1)


def query_log_prob_grad(belief, query, upstream: float = 1.0) -> np.ndarray:
    """Gradient of :func:`query_log_prob` with respect to the belief."""
    belief = np.asarray(belief)
    q = _check_query(query, belief.shape[-1])
    return query_log_probs_grad(belief[None, :], q[None, :], np.asarray([upstream]))[0]


def query_log_probs_grad(beliefs: np.ndarray, queries: np.ndarray,
                         upstream: np.ndarray) -> np.ndarray:
    """Batched gradient of :func:`query_log_probs` w.r.t. the beliefs.

    For m_i = max(p_i, floor), S = sum(m) and D_j = S - sum of m over the
    first j-1 drawn symbols,

        d log pi / d m_i = [i in q] / m_i - sum_j (1 - [i drawn before j]) / D_j

    and d m_i / d p_i is 1 where p_i > floor, else 0.
    """
    beliefs = np.asarray(beliefs)
    m = _floored(beliefs)
    n_rows = m.shape[0]
    total = m.sum(axis=1, keepdims=True)
    mq = np.take_along_axis(m, queries, axis=1)
    drawn_before = np.cumsum(mq, axis=1) - mq
    inv_denom = 1.0 / (total - drawn_before)  # (B, K)
    all_terms = inv_denom.sum(axis=1, keepdims=True)  # sum_j 1/D_j
    suffix = all_terms - np.cumsum(inv_denom, axis=1)  # sum_{j>l} 1/D_j
    grad_m = np.broadcast_to(-all_terms, m.shape).copy()
    rows = np.arange(n_rows)[:, None]
    np.add.at(grad_m, (rows, queries), 1.0 / mq + suffix)
    grad_m *= beliefs > QUERY_PROB_FLOOR
    return grad_m * np.asarray(upstream, dtype=np.float64)[:, None]


# ---------------------------------------------------------------------------
# response pools
# ---------------------------------------------------------------------------


@dataclass
class ResponsePool:
    """Labeled response tensors: target (n_t, c, f) and nontarget (n_nt, c, f)."""

    target: np.ndarray
    nontarget: np.ndarray

    def __post_init__(self):
        for label, arr in (("target", self.target), ("nontarget", self.nontarget)):
            if arr.ndim != 3:
                raise ValueError(f"{label} pool must be 3-d (count, channels, samples)")
            if arr.shape[0] < 1:
                raise ValueError(f"{label} pool is empty")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{label} pool contains non-finite values")
        if self.target.shape[1:] != self.nontarget.shape[1:]:
            raise ValueError(
                f"pool shape mismatch: target {self.target.shape[1:]} vs "
                f"nontarget {self.nontarget.shape[1:]}"
            )

    @property
    def channels(self) -> int:
        return self.target.shape[1]

    @property
    def samples(self) -> int:
        return self.target.shape[2]

    def split(self, fraction: float, rng: np.random.Generator):
        """Split off a held-out fraction of each class; returns (main, held)."""
        if not 0.0 < fraction < 1.0:
            raise ConfigurationError(f"split fraction must be in (0, 1), got {fraction}")
        parts = []
        for arr in (self.target, self.nontarget):
            n = arr.shape[0]
            n_held = min(n - 1, max(1, round(fraction * n)))
            perm = rng.permutation(n)
            parts.append((arr[perm[n_held:]], arr[perm[:n_held]]))
        (t_main, t_held), (n_main, n_held_arr) = parts
        return ResponsePool(t_main, n_main), ResponsePool(t_held, n_held_arr)


def draw_responses(query, target: int, pool: ResponsePool,
                   rng: np.random.Generator) -> np.ndarray:
    """Sample one response row per queried symbol, with replacement.

    Row k comes from the target pool when query[k] equals the target symbol,
    otherwise from the nontarget pool.
    """
    q = np.asarray(query, dtype=np.int64)
    return draw_responses_batch(q[None, :], np.asarray([target]), pool, rng)[0]


def draw_responses_batch(queries: np.ndarray, targets: np.ndarray, pool: ResponsePool,
                         rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`draw_responses`: (B, K) queries -> (B, K, c, f)."""
    return draw_response_items(queries, targets, pool, rng)[0]


def draw_response_items(queries: np.ndarray, targets: np.ndarray, pool: ResponsePool,
                        rng: np.random.Generator):
    """Like :func:`draw_responses_batch` but also returns the drawn item index
    per response row, so a rollout can be replayed exactly."""
    hit = queries == np.asarray(targets)[:, None]
    idx_t = rng.integers(pool.target.shape[0], size=queries.shape)
    idx_n = rng.integers(pool.nontarget.shape[0], size=queries.shape)
    items = np.where(hit, idx_t, idx_n)
    responses = np.where(hit[..., None, None], pool.target[idx_t], pool.nontarget[idx_n])
    return responses, items


def scripted_responses(queries: np.ndarray, targets: np.ndarray, items: np.ndarray,
                       pool: ResponsePool) -> np.ndarray:
    """Deterministic response gather for enumeration/replay: item index per row."""
    hit = queries == np.asarray(targets)[:, None]
    return np.where(
        hit[..., None, None],
        pool.target[items % pool.target.shape[0]],
        pool.nontarget[items % pool.nontarget.shape[0]],
    )


# ---------------------------------------------------------------------------
# synthetic pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic pool generator settings.

    ``separation`` is the per-element distance between class means, in units
    of the per-element standard deviation (which is 1). The shift is applied
    on a fixed pattern: the first ceil(channels/2) channels, over a centered
    time window of width max(1, samples // 4).
    """

    channels: int
    samples: int
    separation: float
    count_target: int = 300
    count_nontarget: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.channels < 1 or self.samples < 1:
            raise ConfigurationError("synthetic pools need channels >= 1 and samples >= 1")
        if self.separation < 0:
            raise ConfigurationError(f"class separation must be >= 0, got {self.separation}")
        if self.count_target < 1 or self.count_nontarget < 1:
            raise ConfigurationError("per-class counts must be >= 1")


def synth_pattern_mask(channels: int, samples: int) -> np.ndarray:
    """Boolean (channels, samples) mask of the shifted pattern elements."""
    mask = np.zeros((channels, samples), dtype=bool)
    width = max(1, samples // 4)
    start = (samples - width) // 2
    mask[: math.ceil(channels / 2), start : start + width] = True
    return mask


def synth_pools(cfg: SynthConfig) -> ResponsePool:
    """Unit-variance Gaussian pools; target items get +separation on the pattern."""
    rng = np.random.default_rng(cfg.seed)
    target = rng.standard_normal((cfg.count_target, cfg.channels, cfg.samples))
    nontarget = rng.standard_normal((cfg.count_nontarget, cfg.channels, cfg.samples))
    target[:, synth_pattern_mask(cfg.channels, cfg.samples)] += cfg.separation
    return ResponsePool(target.astype(np.float32), nontarget.astype(np.float32))


# ---------------------------------------------------------------------------
# dataset files: JSON manifest + raw little-endian float32 blobs
# ---------------------------------------------------------------------------


def save_pools(pool: ResponsePool, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "channels": pool.channels,
        "samples": pool.samples,
        "count_target": pool.target.shape[0],
        "count_nontarget": pool.nontarget.shape[0],
        "dtype": "f32le",
        "target_file": "target.bin",
        "nontarget_file": "nontarget.bin",
    }
    (directory / "target.bin").write_bytes(
        np.ascontiguousarray(pool.target, dtype="<f4").tobytes()
    )
    (directory / "nontarget.bin").write_bytes(
        np.ascontiguousarray(pool.nontarget, dtype="<f4").tobytes()
    )
    path = directory / POOL_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_pools(path) -> ResponsePool:
    """Load pools exactly as stored; any inconsistency raises DataError."""
    path = Path(path)
    manifest_path = path / POOL_MANIFEST if path.is_dir() else path
    if not manifest_path.exists():
        raise DataError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    for key in _MANIFEST_KEYS:
        if key not in manifest:
            raise DataError(f"dataset manifest missing field '{key}': {manifest_path}")
    if manifest["dtype"] != "f32le":
        raise DataError(f"dataset dtype '{manifest['dtype']}' unsupported (want f32le)")

    def read_blob(count_key: str, file_key: str) -> np.ndarray:
        count = int(manifest[count_key])
        blob_path = manifest_path.parent / manifest[file_key]
        if not blob_path.exists():
            raise DataError(f"dataset blob missing for '{file_key}': {blob_path}")
        raw = blob_path.read_bytes()
        expected = 4 * count * manifest["channels"] * manifest["samples"]
        if len(raw) != expected:
            raise DataError(
                f"dataset blob for '{file_key}' has {len(raw)} bytes, "
                f"manifest implies {expected}"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(
            count, manifest["channels"], manifest["samples"]
        )
        if not np.all(np.isfinite(arr)):
            raise DataError(f"dataset blob for '{file_key}' contains non-finite values")
        return arr.copy()

    return ResponsePool(
        target=read_blob("count_target", "target_file"),
        nontarget=read_blob("count_nontarget", "nontarget_file"),
    )
