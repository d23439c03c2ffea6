"""Recursive classifier: conv feature extractor, alphabet feature mapping,
core recurrence, softmax classifier head, and scalar baseline head, composed
into full N-sequence typing-trial rollouts with a hand-written backward pass.

Per sequence n (hidden state h, belief p over the alphabet):

    q_n  ~ belief-driven query sampler (simulator)
    E_n  ~ response pools given q_n and the target
    G_n[i] = extract(E_n at i's query position) if i queried else zeros
    h_n  = layernorm(rect(linear(h_{n-1}) + linear(flatten(G_n))))
    p_n  = softmax(linear(h_n));  b_n = linear(h_n)

The rollout records the log-probability of each sampled query, which is the
quantity the policy-gradient loss differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import simulator, tensor
from .errors import ConfigurationError, DimensionError
from .simulator import ResponsePool
from .tensor import ParamStore

DEFAULT_CONV_SPEC = ((8, 7, 2), (16, 5, 2), (16, 5, 1), (32, 3, 1), (32, 3, 1))


def conv_spec_output_len(conv_spec, samples: int) -> int:
    """Time-axis length after the conv stack; raises if any layer underflows."""
    t = samples
    for i, (out_ch, kernel, stride) in enumerate(conv_spec, start=1):
        if out_ch < 1 or kernel < 1 or stride < 1:
            raise ConfigurationError(f"conv layer {i} spec must be positive: {(out_ch, kernel, stride)}")
        if t < kernel:
            raise ConfigurationError(
                f"conv layer {i} kernel {kernel} exceeds remaining time axis {t}"
            )
        t = (t - kernel) // stride + 1
    return t


@dataclass(frozen=True)
class ModelConfig:
    """Static shape configuration for the recursive classifier."""

    alphabet_size: int = 28
    query_size: int = 10
    max_sequences: int = 10
    channels: int = 4
    samples: int = 64
    feature_len: int = 64
    hidden_len: int = 128
    conv_spec: tuple = DEFAULT_CONV_SPEC

    def __post_init__(self):
        if self.alphabet_size < 2:
            raise ConfigurationError(f"alphabet size must be >= 2, got {self.alphabet_size}")
        if not 1 <= self.query_size <= self.alphabet_size:
            raise ConfigurationError(
                f"query size {self.query_size} must be in 1..{self.alphabet_size}"
            )
        for name in ("max_sequences", "channels", "samples", "feature_len", "hidden_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if len(self.conv_spec) != 5:
            raise ConfigurationError(
                f"feature extractor needs exactly 5 conv layers, got {len(self.conv_spec)}"
            )
        conv_spec_output_len(self.conv_spec, self.samples)  # validates

    def to_dict(self) -> dict:
        return {
            "alphabet_size": self.alphabet_size,
            "query_size": self.query_size,
            "max_sequences": self.max_sequences,
            "channels": self.channels,
            "samples": self.samples,
            "feature_len": self.feature_len,
            "hidden_len": self.hidden_len,
            "conv_spec": [list(layer) for layer in self.conv_spec],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_spec"] = tuple(tuple(layer) for layer in d["conv_spec"])
        return cls(**d)


INIT_POLICIES = ("glorot", "preserving")


def init_model_params(cfg: ModelConfig, seed: int, dtype=np.float32,
                      init_policy: str = "glorot") -> ParamStore:
    """Seeded parameter store for the classifier.

    ``glorot`` is plain uniform +-sqrt(6/(fan_in+fan_out)). ``preserving``
    rescales the extractor so activation variance survives the rectified conv
    stack, and widens the observation linear to account for the grid being
    structurally sparse (only K of A rows are nonzero); without this the
    observation pathway starts an order of magnitude quieter than the
    recurrent pathway and weak-signal runs never take off.
    """
    if init_policy not in INIT_POLICIES:
        raise ConfigurationError(
            f"unknown init policy '{init_policy}', pick one of {INIT_POLICIES}"
        )
    store = ParamStore(seed, dtype=dtype)
    ch = cfg.channels
    for i, (out_ch, kernel, _) in enumerate(cfg.conv_spec, start=1):
        tensor.add_conv1d(store, f"fe.conv{i}", ch, out_ch, kernel)
        if init_policy == "preserving":
            fan_in, fan_out = ch * kernel, out_ch * kernel
            store.value(f"fe.conv{i}.w")[...] *= np.sqrt((fan_in + fan_out) / fan_in)
        ch = out_ch
    tensor.add_linear(store, "fe.out", ch, cfg.feature_len)
    tensor.add_linear(store, "core.prev", cfg.hidden_len, cfg.hidden_len)
    tensor.add_linear(store, "core.obs", cfg.alphabet_size * cfg.feature_len, cfg.hidden_len)
    tensor.add_layernorm(store, "core.norm", cfg.hidden_len)
    tensor.add_linear(store, "head.classify", cfg.hidden_len, cfg.alphabet_size)
    tensor.add_linear(store, "head.baseline", cfg.hidden_len, 1)
    if init_policy == "preserving":
        store.value("fe.out.w")[...] *= np.sqrt((ch + cfg.feature_len) / ch)
        store.value("core.obs.w")[...] *= np.sqrt(cfg.alphabet_size / cfg.query_size)
    return store


# ---------------------------------------------------------------------------
# network pieces
# ---------------------------------------------------------------------------


def extract(store: ParamStore, cfg: ModelConfig, responses: np.ndarray):
    """Feature extractor: (..., c, f) responses -> (..., L) features."""
    responses = np.asarray(responses)
    if responses.shape[-2:] != (cfg.channels, cfg.samples):
        raise DimensionError(
            f"extract: responses have shape {responses.shape[-2:]}, "
            f"config expects {(cfg.channels, cfg.samples)}"
        )
    lead = responses.shape[:-2]
    flat = responses.reshape((-1,) + responses.shape[-2:])
    pooled, c_stack = tensor.conv_stack(store, "fe.conv", cfg.conv_spec, flat)
    feats, c_out = tensor.linear(store, "fe.out", pooled)
    return feats.reshape(lead + (cfg.feature_len,)), (lead, c_stack, c_out)


def extract_bwd(store: ParamStore, cache, gfeats: np.ndarray) -> np.ndarray:
    lead, c_stack, c_out = cache
    gflat = gfeats.reshape(-1, gfeats.shape[-1])
    gpooled = tensor.linear_bwd(store, c_out, gflat)
    gresp = tensor.conv_stack_bwd(store, c_stack, gpooled)
    return gresp.reshape(lead + gresp.shape[-2:])


def map_features(store: ParamStore, cfg: ModelConfig, responses: np.ndarray,
                 queries: np.ndarray):
    """Extract features and place them by symbol index.

    Row i of the output equals the extracted feature of the response at i's
    position in the query when i was queried, and exactly zero otherwise.
    (B, K, c, f) x (B, K) -> (B, A, L); a single trial may omit the batch axis.
    """
    responses = np.asarray(responses)
    queries = np.asarray(queries, dtype=np.int64)
    single = queries.ndim == 1
    if single:
        responses = responses[None]
        queries = queries[None]
    n_rows, k = queries.shape
    for row in range(n_rows):
        simulator._check_query(queries[row], cfg.alphabet_size)
    feats, c_extract = extract(store, cfg, responses)
    grid = np.zeros((n_rows, cfg.alphabet_size, cfg.feature_len), dtype=feats.dtype)
    rows = np.arange(n_rows)[:, None]
    grid[rows, queries] = feats
    cache = (queries, c_extract, single)
    return (grid[0] if single else grid), cache


def map_features_bwd(store: ParamStore, cache, ggrid: np.ndarray) -> np.ndarray:
    queries, c_extract, single = cache
    if single:
        ggrid = ggrid[None]
    rows = np.arange(queries.shape[0])[:, None]
    gfeats = ggrid[rows, queries]
    gresp = extract_bwd(store, c_extract, gfeats)
    return gresp[0] if single else gresp


def core_update(store: ParamStore, cfg: ModelConfig, h_prev: np.ndarray, grid: np.ndarray):
    """h_n = layernorm(rect(linear(h_prev) + linear(flatten(grid))))."""
    h_prev = np.asarray(h_prev)
    grid = np.asarray(grid)
    single = h_prev.ndim == 1
    if single:
        h_prev = h_prev[None]
        grid = grid[None]
    flat_grid = grid.reshape(grid.shape[0], -1)
    a_prev, c_prev = tensor.linear(store, "core.prev", h_prev)
    a_obs, c_obs = tensor.linear(store, "core.obs", flat_grid)
    pre, c_rect = tensor.rect(a_prev + a_obs)
    h, c_norm = tensor.layernorm(store, "core.norm", pre)
    cache = (c_prev, c_obs, c_rect, c_norm, grid.shape, single)
    return (h[0] if single else h), cache


def core_update_bwd(store: ParamStore, cache, gh: np.ndarray):
    c_prev, c_obs, c_rect, c_norm, grid_shape, single = cache
    if single:
        gh = gh[None]
    gpre = tensor.layernorm_bwd(store, c_norm, gh)
    ga = tensor.rect_bwd(c_rect, gpre)
    gh_prev = tensor.linear_bwd(store, c_prev, ga)
    ggrid = tensor.linear_bwd(store, c_obs, ga).reshape(grid_shape)
    if single:
        return gh_prev[0], ggrid[0]
    return gh_prev, ggrid


def classify(store: ParamStore, h: np.ndarray):
    """Belief over the alphabet: softmax(linear(h))."""
    logits, c_lin = tensor.linear(store, "head.classify", h)
    p = tensor.softmax(logits)
    return p, (c_lin, p)


def classify_bwd(store: ParamStore, cache, gbelief=None, glogits=None) -> np.ndarray:
    c_lin, p = cache
    total = None
    if gbelief is not None:
        total = tensor.softmax_bwd(p, gbelief)
    if glogits is not None:
        total = glogits if total is None else total + glogits
    if total is None:
        total = np.zeros_like(p)
    return tensor.linear_bwd(store, c_lin, total)


def baseline_value(store: ParamStore, h: np.ndarray):
    """Scalar affine function of the hidden state."""
    b, c_lin = tensor.linear(store, "head.baseline", h)
    return b[..., 0], c_lin


def baseline_value_bwd(store: ParamStore, cache, gb: np.ndarray, into_hidden: bool = True):
    gh = tensor.linear_bwd(store, cache, np.asarray(gb)[..., None])
    return gh if into_hidden else None


# ---------------------------------------------------------------------------
# trial rollouts
# ---------------------------------------------------------------------------


@dataclass
class TrialTrace:
    """Per-sequence record of one typing trial."""

    target: int
    initial_belief: np.ndarray           # (A,)
    queries: np.ndarray                  # (N, K)
    query_log_probs: np.ndarray          # (N,)
    beliefs: np.ndarray                  # (N, A)
    baselines: np.ndarray | None = None  # (N,)
    hiddens: np.ndarray | None = None    # (N, v)


@dataclass
class QueryScript:
    """Predetermined outcomes for a rollout (replay / enumeration)."""

    queries: np.ndarray  # (B, N, K)
    items: np.ndarray    # (B, N, K) pool item index per response row


@dataclass
class Rollout:
    """Batched trial rollout; caches are kept only when training needs them."""

    targets: np.ndarray        # (B,)
    initial_belief: np.ndarray
    queries: np.ndarray        # (B, N, K)
    log_probs: np.ndarray      # (B, N) float64
    beliefs: np.ndarray        # (B, N, A)
    baselines: np.ndarray      # (B, N)
    hiddens: np.ndarray        # (B, N, v)
    caches: list | None = field(default=None, repr=False)
    script: "QueryScript | None" = field(default=None, repr=False)

    def trace(self, row: int) -> TrialTrace:
        return TrialTrace(
            target=int(self.targets[row]),
            initial_belief=self.initial_belief.copy(),
            queries=self.queries[row].copy(),
            query_log_probs=self.log_probs[row].copy(),
            beliefs=self.beliefs[row].copy(),
            baselines=self.baselines[row].copy(),
            hiddens=self.hiddens[row].copy(),
        )


def run_trials(store: ParamStore, cfg: ModelConfig, pool: ResponsePool,
               targets, rng: np.random.Generator | None = None,
               script: QueryScript | None = None,
               keep_caches: bool = False,
               record_script: bool = False) -> Rollout:
    """Roll a batch of typing trials forward in lockstep.

    Queries come from the evolving belief (or from ``script``), responses from
    the pool. The initial belief is uniform and the initial hidden state zero.
    """
    if (pool.channels, pool.samples) != (cfg.channels, cfg.samples):
        raise DimensionError(
            f"pool responses are {(pool.channels, pool.samples)}, "
            f"config expects {(cfg.channels, cfg.samples)}"
        )
    targets = np.asarray(targets, dtype=np.int64)
    n_rows = targets.shape[0]
    n_seq = cfg.max_sequences
    dtype = store.dtype
    p_prev = np.full((n_rows, cfg.alphabet_size), 1.0 / cfg.alphabet_size, dtype=dtype)
    initial_belief = p_prev[0].copy()
    h_prev = np.zeros((n_rows, cfg.hidden_len), dtype=dtype)

    queries = np.zeros((n_rows, n_seq, cfg.query_size), dtype=np.int64)
    log_probs = np.zeros((n_rows, n_seq), dtype=np.float64)
    beliefs = np.zeros((n_rows, n_seq, cfg.alphabet_size), dtype=dtype)
    baselines = np.zeros((n_rows, n_seq), dtype=dtype)
    hiddens = np.zeros((n_rows, n_seq, cfg.hidden_len), dtype=dtype)
    caches = [] if keep_caches else None
    items = np.zeros_like(queries) if record_script else None

    for n in range(n_seq):
        if script is not None:
            q = script.queries[:, n]
            responses = simulator.scripted_responses(q, targets, script.items[:, n], pool)
        else:
            q = simulator.sample_queries(p_prev, cfg.query_size, rng)
            responses, drawn = simulator.draw_response_items(q, targets, pool, rng)
            if record_script:
                items[:, n] = drawn
        responses = responses.astype(dtype, copy=False)
        log_probs[:, n] = simulator.query_log_probs(p_prev, q)
        grid, c_map = map_features(store, cfg, responses, q)
        h, c_core = core_update(store, cfg, h_prev, grid)
        p, c_cls = classify(store, h)
        b, c_base = baseline_value(store, h)

        queries[:, n] = q
        beliefs[:, n] = p
        baselines[:, n] = b
        hiddens[:, n] = h
        if keep_caches:
            caches.append((c_map, c_core, c_cls, c_base))
        p_prev, h_prev = p, h

    recorded = QueryScript(queries=queries.copy(), items=items) if record_script else None
    return Rollout(targets, initial_belief, queries, log_probs, beliefs,
                   baselines, hiddens, caches, recorded)


def run_trial(store: ParamStore, cfg: ModelConfig, pool: ResponsePool, target: int,
              rng: np.random.Generator) -> TrialTrace:
    """Single typing trial; see :func:`run_trials`."""
    return run_trials(store, cfg, pool, [target], rng=rng).trace(0)


def rollout_backward(store: ParamStore, cfg: ModelConfig, rollout: Rollout, *,
                     final_logit_grad: np.ndarray | None = None,
                     log_prob_grads: np.ndarray | None = None,
                     baseline_grads: np.ndarray | None = None) -> None:
    """Backpropagate through a cached rollout, accumulating parameter grads.

    ``final_logit_grad`` (B, A) applies at the last sequence's classifier
    logits; ``log_prob_grads`` (B, N) are d(loss)/d(log pi_n), which flow into
    the belief that sequence n sampled its query from (sequence 1 samples from
    the constant uniform prior, so it contributes no parameter gradient);
    ``baseline_grads`` (B, N) flow into the baseline head only, by design.
    """
    if rollout.caches is None:
        raise ConfigurationError("rollout_backward needs a rollout with keep_caches=True")
    n_rows, n_seq = rollout.baselines.shape
    dtype = store.dtype
    gh_carry = np.zeros((n_rows, cfg.hidden_len), dtype=dtype)
    gbelief_next = None  # grad w.r.t. beliefs[:, n] coming from log pi_{n+1}

    for n in reversed(range(n_seq)):
        c_map, c_core, c_cls, c_base = rollout.caches[n]
        glogits = final_logit_grad if n == n_seq - 1 else None
        gh = classify_bwd(store, c_cls, gbelief=gbelief_next, glogits=glogits)
        gh += gh_carry
        if baseline_grads is not None:
            baseline_value_bwd(store, c_base, baseline_grads[:, n].astype(dtype),
                               into_hidden=False)
        gh_prev, ggrid = core_update_bwd(store, c_core, gh)
        map_features_bwd(store, c_map, ggrid)
        if log_prob_grads is not None and n >= 1:
            gbelief_next = simulator.query_log_probs_grad(
                rollout.beliefs[:, n - 1], rollout.queries[:, n], log_prob_grads[:, n]
            ).astype(dtype)
        else:
            gbelief_next = None
        gh_carry = gh_prev


class MarkovTypePolicy:
    """Frozen-parameter typing policy exposing the evaluation interface."""

    name = "markovtype"

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.store = store
        self.cfg = cfg

    @property
    def alphabet_size(self) -> int:
        return self.cfg.alphabet_size

    @property
    def query_size(self) -> int:
        return self.cfg.query_size

    @property
    def max_sequences(self) -> int:
        return self.cfg.max_sequences

    @property
    def num_params(self) -> int:
        return self.store.num_params()

    def trial_beliefs(self, target: int, pool: ResponsePool,
                      rng: np.random.Generator) -> np.ndarray:
        """Belief after each sequence of one trial: (N, A) float64."""
        ro = run_trials(self.store, self.cfg, pool, [target], rng=rng)
        return ro.beliefs[0].astype(np.float64)


def save_model_checkpoint(store: ParamStore, cfg: ModelConfig, directory,
                          extra: dict | None = None):
    config = {"kind": "markovtype", "model": cfg.to_dict()}
    if extra:
        config.update(extra)
    return tensor.save_checkpoint(store, directory, config=config)


def load_model_checkpoint(directory):
    """Load a classifier checkpoint; validates stored shapes against its config."""
    store, config = tensor.load_checkpoint(directory)
    if not config or config.get("kind") != "markovtype":
        raise ConfigurationError(f"checkpoint at {directory} is not a markovtype model")
    cfg = ModelConfig.from_dict(config["model"])
    expected = init_model_params(cfg, seed=0)
    for name in expected.names():
        if name not in store.names():
            raise DimensionError(f"checkpoint missing parameter '{name}'")
        if store.value(name).shape != expected.value(name).shape:
            raise DimensionError(
                f"checkpoint parameter '{name}' has shape {store.value(name).shape}, "
                f"config implies {expected.value(name).shape}"
            )
    return store, cfg, config
