"""Dense float tensor substrate: named parameters with gradient buffers,
hand-written layer forward/backward passes, Adam, finite-difference gradient
checking, and a manifest+blob checkpoint format.

All math runs on plain numpy arrays in float32. A store can be created in
float64 ("mirror mode") for gradient-check tests; every op preserves the
dtype it is given.

Conventions:

* each differentiable op ``f(store, name, x, ...)`` returns ``(y, cache)``;
  the matching ``f_bwd(store, cache, gy)`` accumulates parameter gradients
  into the store's gradient buffers and returns the gradient w.r.t. ``x``;
* arrays may carry arbitrary leading batch dimensions, the documented
  shapes are the trailing ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, DimensionError

LAYERNORM_EPS = 1e-5

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"


class ParamStore:
    """Named value tensors with paired, same-shaped gradient buffers."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(self.rng_seed)
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def _register(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise ConfigurationError(f"parameter '{name}' already registered")
        self._values[name] = np.ascontiguousarray(value, dtype=self.dtype)
        self._grads[name] = np.zeros_like(self._values[name])

    def add_uniform(self, name: str, shape, fan_in: int, fan_out: int) -> None:
        """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out))."""
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self._register(name, self._rng.uniform(-bound, bound, size=shape))

    def add_constant(self, name: str, shape, value: float = 0.0) -> None:
        self._register(name, np.full(shape, value, dtype=self.dtype))

    def add_raw(self, name: str, value: np.ndarray) -> None:
        self._register(name, value)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def names(self) -> list[str]:
        return list(self._values)

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def num_params(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def astype(self, dtype) -> "ParamStore":
        """Copy of this store in another precision (values only, zero grads)."""
        out = ParamStore(self.rng_seed, dtype=dtype)
        for name, v in self._values.items():
            out.add_raw(name, v.astype(dtype))
        return out


def add_linear(store: ParamStore, name: str, d_in: int, d_out: int) -> None:
    store.add_uniform(name + ".w", (d_in, d_out), d_in, d_out)
    store.add_constant(name + ".b", (d_out,))


def add_conv1d(store: ParamStore, name: str, ch_in: int, ch_out: int, kernel: int) -> None:
    store.add_uniform(name + ".w", (ch_out, ch_in, kernel), ch_in * kernel, ch_out * kernel)
    store.add_constant(name + ".b", (ch_out,))


def add_layernorm(store: ParamStore, name: str, d: int) -> None:
    store.add_constant(name + ".g", (d,), 1.0)
    store.add_constant(name + ".b", (d,), 0.0)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def linear(store: ParamStore, name: str, x: np.ndarray):
    """Affine map over the last axis: (..., d_in) -> (..., d_out)."""
    w = store.value(name + ".w")
    b = store.value(name + ".b")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear '{name}': input feature size {x.shape[-1]} does not match "
            f"weight shape {w.shape}"
        )
    return x @ w + b, (name, x)


def linear_bwd(store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
    name, x = cache
    w = store.value(name + ".w")
    xr = x.reshape(-1, x.shape[-1])
    gyr = gy.reshape(-1, gy.shape[-1])
    store.grad(name + ".w")[...] += xr.T @ gyr
    store.grad(name + ".b")[...] += gyr.sum(axis=0)
    return (gy @ w.T).reshape(x.shape)


def conv1d(store: ParamStore, name: str, x: np.ndarray, stride: int = 1):
    """Valid (no-padding) cross-correlation along the last (time) axis.

    Input (..., ch_in, time) -> (..., ch_out, time') with
    time' = floor((time - kernel) / stride) + 1. Implemented as an im2col
    matmul so batches of small responses stay on the BLAS path.
    """
    if stride < 1:
        raise ConfigurationError(f"conv1d '{name}': stride must be >= 1, got {stride}")
    w = store.value(name + ".w")
    b = store.value(name + ".b")
    ch_out, ch_in, kernel = w.shape
    squeeze = x.ndim == 2
    x3 = x[None] if squeeze else x
    if x3.ndim != 3:
        raise DimensionError(f"conv1d '{name}': expected 2- or 3-d input, got shape {x.shape}")
    if x3.shape[1] != ch_in:
        raise DimensionError(
            f"conv1d '{name}': input has {x3.shape[1]} channels, weights expect {ch_in}"
        )
    n_rows, _, time = x3.shape
    if time < kernel:
        raise DimensionError(
            f"conv1d '{name}': time axis {time} is shorter than kernel {kernel}"
        )
    t_out = (time - kernel) // stride + 1
    windows = sliding_window_view(x3, kernel, axis=2)[:, :, ::stride, :]  # (B, c, T', k)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
        n_rows * t_out, ch_in * kernel
    )
    y2 = cols @ w.reshape(ch_out, ch_in * kernel).T
    y = y2.reshape(n_rows, t_out, ch_out).transpose(0, 2, 1) + b[None, :, None]
    cache = (name, x3.shape, cols, stride, squeeze, t_out)
    return (y[0] if squeeze else y), cache


def conv1d_bwd(store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
    name, x_shape, cols, stride, squeeze, t_out = cache
    gy3 = gy[None] if squeeze else gy
    w = store.value(name + ".w")
    ch_out, ch_in, kernel = w.shape
    gy2 = np.ascontiguousarray(gy3.transpose(0, 2, 1)).reshape(-1, ch_out)
    store.grad(name + ".w")[...] += (gy2.T @ cols).reshape(ch_out, ch_in, kernel)
    store.grad(name + ".b")[...] += gy2.sum(axis=0)
    gcols = gy2 @ w.reshape(ch_out, ch_in * kernel)
    contrib = gcols.reshape(x_shape[0], t_out, ch_in, kernel).transpose(0, 2, 1, 3)
    gx = np.zeros(x_shape, dtype=gy3.dtype)
    for s in range(kernel):
        gx[:, :, s : s + t_out * stride : stride] += contrib[:, :, :, s]
    return gx[0] if squeeze else gx


def rect(x: np.ndarray):
    """Elementwise max(x, 0); gradient passes only where x > 0."""
    return np.maximum(x, 0), (x > 0)


def rect_bwd(cache, gy: np.ndarray) -> np.ndarray:
    return gy * cache


def layernorm(store: ParamStore, name: str, x: np.ndarray):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(
            f"layernorm '{name}': last dimension {d} has no defined variance"
        )
    g = store.value(name + ".g")
    if g.shape[0] != d:
        raise DimensionError(
            f"layernorm '{name}': input width {d} does not match scale width {g.shape[0]}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LAYERNORM_EPS, dtype=x.dtype))
    xhat = xc * inv
    y = xhat * g + store.value(name + ".b")
    return y, (name, xhat, inv)


def layernorm_bwd(store: ParamStore, cache, gy: np.ndarray) -> np.ndarray:
    name, xhat, inv = cache
    g = store.value(name + ".g")
    lead = (-1, gy.shape[-1])
    store.grad(name + ".g")[...] += (gy * xhat).reshape(lead).sum(axis=0)
    store.grad(name + ".b")[...] += gy.reshape(lead).sum(axis=0)
    gxh = gy * g
    m1 = gxh.mean(axis=-1, keepdims=True)
    m2 = (gxh * xhat).mean(axis=-1, keepdims=True)
    return inv * (gxh - m1 - xhat * m2)


def softmax(x: np.ndarray) -> np.ndarray:
    """Stabilized softmax over the last axis. The output is its own cache."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def mean_pool(x: np.ndarray):
    """Mean over the last (time) axis."""
    return x.mean(axis=-1), x.shape


def mean_pool_bwd(cache, gy: np.ndarray) -> np.ndarray:
    shape = cache
    t = shape[-1]
    return np.broadcast_to((gy / t)[..., None], shape).copy()


def sigmoid_clamped(x: np.ndarray, limit: float = 15.0):
    """Sigmoid of logits clamped to [-limit, limit]; output strictly in (0, 1)."""
    xc = np.clip(x, -limit, limit)
    s = 1.0 / (1.0 + np.exp(-xc))
    mask = np.abs(x) < limit
    return s, (s, mask)


def sigmoid_clamped_bwd(cache, gy: np.ndarray) -> np.ndarray:
    s, mask = cache
    return gy * s * (1.0 - s) * mask


def conv_stack(store: ParamStore, prefix: str, spec, x: np.ndarray):
    """Conv1d+rect layers from ``spec`` followed by a mean-pool over time.

    ``spec`` is a sequence of (out_channels, kernel, stride) triples; layer i
    uses parameters '<prefix><i>' (1-based). Input (..., ch, time) -> (..., ch_last).
    """
    caches = []
    h = x
    for i, (_, _, stride) in enumerate(spec, start=1):
        h, c_conv = conv1d(store, f"{prefix}{i}", h, stride=stride)
        h, c_rect = rect(h)
        caches.append((c_conv, c_rect))
    pooled, c_pool = mean_pool(h)
    return pooled, (caches, c_pool)


def conv_stack_bwd(store: ParamStore, cache, gpooled: np.ndarray) -> np.ndarray:
    caches, c_pool = cache
    gh = mean_pool_bwd(c_pool, gpooled)
    for c_conv, c_rect in reversed(caches):
        gh = rect_bwd(c_rect, gh)
        gh = conv1d_bwd(store, c_conv, gh)
    return gh


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments and step counter for one ParamStore."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update, in place, from the current gradients."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in store.names():
        v = store.value(name)
        g = store.grad(name)
        m = state.first_moment.setdefault(name, np.zeros_like(v))
        s2 = state.second_moment.setdefault(name, np.zeros_like(v))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        s2 *= state.beta2
        s2 += (1.0 - state.beta2) * (g * g)
        v -= state.learning_rate * (m / c1) / (np.sqrt(s2 / c2) + state.epsilon)


def decay_lr(state: AdamState, factor: float) -> None:
    if not 0.0 < factor <= 1.0:
        raise ConfigurationError(f"learning-rate decay factor must be in (0, 1], got {factor}")
    state.learning_rate *= factor


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_entry: str
    per_entry: dict


def grad_check(loss_fn, store: ParamStore, names=None, step: float = 1e-3,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(store)`` must return a scalar loss and populate the store's
    gradient buffers via the hand-written backward passes. Inputs can be
    checked too by registering them as parameters. The relative error of an
    element is |a - n| / max(|a|, |n|, floor).
    """
    if names is None:
        names = store.names()
    store.zero_grads()
    loss_fn(store)
    analytic = {n: store.grad(n).copy() for n in names}

    per_entry: dict[str, float] = {}
    worst_entry = ""
    worst = 0.0
    for name in names:
        v = store.value(name)
        a = analytic[name]
        numeric = np.zeros_like(a, dtype=np.float64)
        flat_v = v.reshape(-1)
        flat_n = numeric.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + step
            up = float(loss_fn(store))
            flat_v[i] = orig - step
            down = float(loss_fn(store))
            flat_v[i] = orig
            flat_n[i] = (up - down) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        rel = np.abs(a - numeric) / denom
        entry_err = float(rel.max()) if rel.size else 0.0
        per_entry[name] = entry_err
        if entry_err >= worst:
            worst = entry_err
            worst_entry = name
    return GradCheckReport(max_rel_error=worst, worst_entry=worst_entry, per_entry=per_entry)


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + raw little-endian float32 blob
# ---------------------------------------------------------------------------


def save_checkpoint(store: ParamStore, directory, config: dict | None = None) -> Path:
    """Write manifest.json (name -> shape -> byte offset) and params.bin."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(store.names()):
        v = np.ascontiguousarray(store.value(name), dtype="<f4")
        raw = v.tobytes()
        entries[name] = {"shape": list(v.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "dtype": "f32le",
        "rng_seed": store.rng_seed,
        "params": entries,
        "config": config,
    }
    (directory / CHECKPOINT_BLOB).write_bytes(b"".join(chunks))
    (directory / CHECKPOINT_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return directory / CHECKPOINT_MANIFEST


def load_checkpoint(directory):
    """Load a checkpoint saved by :func:`save_checkpoint`.

    Returns ``(store, config)``; bit-exact round trip for float32 stores.
    """
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST
    blob_path = directory / CHECKPOINT_BLOB
    if not manifest_path.exists():
        raise DataError(f"checkpoint manifest not found: {manifest_path}")
    if not blob_path.exists():
        raise DataError(f"checkpoint blob not found: {blob_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("dtype") != "f32le":
        raise DataError(f"checkpoint dtype '{manifest.get('dtype')}' unsupported (want f32le)")
    blob = blob_path.read_bytes()
    store = ParamStore(manifest.get("rng_seed", 0))
    for name in sorted(manifest["params"]):
        entry = manifest["params"][name]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise DataError(
                f"checkpoint blob truncated: parameter '{name}' needs bytes "
                f"[{start}, {end}) but blob has {len(blob)}"
            )
        value = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        if not np.all(np.isfinite(value)):
            raise DataError(f"checkpoint parameter '{name}' contains non-finite values")
        store.add_raw(name, value.copy())
    return store, manifest.get("config")
