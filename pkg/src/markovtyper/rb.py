"""Recursive-Bayes competitor: a binary target/non-target conv classifier
whose scores are fused over the alphabet with a per-symbol likelihood-ratio
update. No hidden state is carried between sequences; queries are still
sampled from the evolving posterior.
"""

from __future__ import annotations

import numpy as np

from dataclasses import dataclass

from . import simulator, tensor
from .errors import ConfigurationError, DimensionError
from .model import DEFAULT_CONV_SPEC, TrialTrace, conv_spec_output_len
from .simulator import ResponsePool, derived_rng
from .tensor import AdamState, ParamStore, adam_step, decay_lr
from .training import HistoryRow, TrainResult

LOGIT_LIMIT = 15.0
RATIO_CLAMP = (1e-6, 1e6)


@dataclass(frozen=True)
class RBConfig:
    """Shapes for the binary classifier and its typing rollouts."""

    alphabet_size: int = 28
    query_size: int = 10
    max_sequences: int = 10
    channels: int = 4
    samples: int = 64
    conv_spec: tuple = DEFAULT_CONV_SPEC

    def __post_init__(self):
        if self.alphabet_size < 2:
            raise ConfigurationError(f"alphabet size must be >= 2, got {self.alphabet_size}")
        if not 1 <= self.query_size <= self.alphabet_size:
            raise ConfigurationError(
                f"query size {self.query_size} must be in 1..{self.alphabet_size}"
            )
        if self.max_sequences < 1 or self.channels < 1 or self.samples < 1:
            raise ConfigurationError("max_sequences, channels and samples must be >= 1")
        conv_spec_output_len(self.conv_spec, self.samples)

    def to_dict(self) -> dict:
        return {
            "alphabet_size": self.alphabet_size,
            "query_size": self.query_size,
            "max_sequences": self.max_sequences,
            "channels": self.channels,
            "samples": self.samples,
            "conv_spec": [list(layer) for layer in self.conv_spec],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RBConfig":
        d = dict(d)
        d["conv_spec"] = tuple(tuple(layer) for layer in d["conv_spec"])
        return cls(**d)


@dataclass(frozen=True)
class RBTrainConfig:
    epochs: int = 25
    learning_rate: float = 0.001
    decay: float = 0.97
    batch_size: int = 28
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be >= 1")


def init_rb_params(cfg: RBConfig, seed: int, dtype=np.float32) -> ParamStore:
    store = ParamStore(seed, dtype=dtype)
    ch = cfg.channels
    for i, (out_ch, kernel, _) in enumerate(cfg.conv_spec, start=1):
        tensor.add_conv1d(store, f"fe.conv{i}", ch, out_ch, kernel)
        ch = out_ch
    tensor.add_linear(store, "head.logit", ch, 1)
    return store


def binary_forward(store: ParamStore, cfg: RBConfig, responses: np.ndarray):
    """Probability that each response is a target response: (..., c, f) -> (...)."""
    responses = np.asarray(responses)
    if responses.shape[-2:] != (cfg.channels, cfg.samples):
        raise DimensionError(
            f"binary_forward: responses have shape {responses.shape[-2:]}, "
            f"config expects {(cfg.channels, cfg.samples)}"
        )
    lead = responses.shape[:-2]
    flat = responses.reshape((-1,) + responses.shape[-2:])
    pooled, c_stack = tensor.conv_stack(store, "fe.conv", cfg.conv_spec, flat)
    logit, c_head = tensor.linear(store, "head.logit", pooled)
    score, c_sig = tensor.sigmoid_clamped(logit[..., 0], limit=LOGIT_LIMIT)
    return score.reshape(lead), (lead, c_stack, c_head, c_sig)


def binary_backward(store: ParamStore, cache, gscore: np.ndarray) -> np.ndarray:
    lead, c_stack, c_head, c_sig = cache
    gflat = np.asarray(gscore).reshape(-1)
    glogit = tensor.sigmoid_clamped_bwd(c_sig, gflat)
    gpooled = tensor.linear_bwd(store, c_head, glogit[:, None])
    gresp = tensor.conv_stack_bwd(store, c_stack, gpooled)
    return gresp.reshape(lead + gresp.shape[-2:])


def _logit_grad_backward(store: ParamStore, cache, glogit: np.ndarray) -> None:
    """Backward from the logit (clamp mask applied); used by the BCE trainer."""
    _, c_stack, c_head, c_sig = cache
    _, mask = c_sig
    gpooled = tensor.linear_bwd(store, c_head, (glogit * mask)[:, None])
    tensor.conv_stack_bwd(store, c_stack, gpooled)


def train_binary(pool: ResponsePool, cfg: RBConfig, tcfg: RBTrainConfig) -> TrainResult:
    """25-epoch binary cross-entropy training over individual responses.

    Classes are rebalanced to 50/50 by resampling the smaller class, so the
    sigmoid output can be read as a balanced-prior target probability.
    """
    if pool.target.shape[0] < 1 or pool.nontarget.shape[0] < 1:
        raise ConfigurationError("binary training needs responses from both classes")
    if (pool.channels, pool.samples) != (cfg.channels, cfg.samples):
        raise DimensionError(
            f"pool responses are {(pool.channels, pool.samples)}, "
            f"config expects {(cfg.channels, cfg.samples)}"
        )
    split_rng = derived_rng(tcfg.seed, 1)
    train_pool, val_pool = pool.split(tcfg.val_fraction, split_rng)

    rng = derived_rng(tcfg.seed, 2)
    n_t = train_pool.target.shape[0]
    n_n = train_pool.nontarget.shape[0]
    n_per_class = max(n_t, n_n)
    idx_t = rng.choice(n_t, size=n_per_class, replace=True) if n_t < n_per_class else np.arange(n_t)
    idx_n = rng.choice(n_n, size=n_per_class, replace=True) if n_n < n_per_class else np.arange(n_n)
    data = np.concatenate([train_pool.target[idx_t], train_pool.nontarget[idx_n]])
    labels = np.concatenate([np.ones(n_per_class, dtype=np.float32),
                             np.zeros(n_per_class, dtype=np.float32)])

    val_x = np.concatenate([val_pool.target, val_pool.nontarget])
    val_y = np.concatenate([np.ones(val_pool.target.shape[0]),
                            np.zeros(val_pool.nontarget.shape[0])])

    store = init_rb_params(cfg, seed=tcfg.seed)
    adam = AdamState(learning_rate=tcfg.learning_rate)
    history: list[HistoryRow] = []
    for epoch in range(tcfg.epochs):
        perm = rng.permutation(data.shape[0])
        epoch_losses = []
        for start in range(0, len(perm), tcfg.batch_size):
            sel = perm[start : start + tcfg.batch_size]
            x, y = data[sel], labels[sel]
            score, cache = binary_forward(store, cfg, x)
            s64 = score.astype(np.float64)
            bce = float(-(y * np.log(s64) + (1 - y) * np.log(1 - s64)).mean())
            store.zero_grads()
            _logit_grad_backward(store, cache, (score - y) / len(sel))
            adam_step(store, adam)
            epoch_losses.append(bce)
        val_scores, _ = binary_forward(store, cfg, val_x)
        val_acc = float(((val_scores > 0.5) == (val_y > 0.5)).mean())
        history.append(HistoryRow(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                                  val_accuracy=val_acc, learning_rate=adam.learning_rate))
        decay_lr(adam, tcfg.decay)
    return TrainResult(params=store, history=history)


# ---------------------------------------------------------------------------
# recursive Bayesian fusion
# ---------------------------------------------------------------------------


def bayes_update(belief, query, scores) -> np.ndarray:
    """Map binary scores onto the alphabet via likelihood ratios s/(1-s).

    Queried symbol i multiplies its mass by the (clamped) ratio; unqueried
    symbols keep their mass; the result is renormalized. Preserves relative
    probabilities of unqueried symbols.
    """
    p = np.asarray(belief, dtype=np.float64)
    simulator.require_belief(p)
    q = simulator._check_query(query, p.shape[0])
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != q.shape:
        raise ValueError(f"scores shape {s.shape} does not match query shape {q.shape}")
    if np.any(s <= 0.0) or np.any(s >= 1.0):
        raise ValueError("scores must lie strictly inside (0, 1)")
    ratios = np.clip(s / (1.0 - s), *RATIO_CLAMP)
    mass = p.copy()
    mass[q] *= ratios
    return mass / mass.sum()


def run_trial_rb(store: ParamStore, cfg: RBConfig, target: int, pool: ResponsePool,
                 rng: np.random.Generator) -> TrialTrace:
    """Typing trial with Bayesian fusion instead of the recurrent update."""
    if (pool.channels, pool.samples) != (cfg.channels, cfg.samples):
        raise DimensionError(
            f"pool responses are {(pool.channels, pool.samples)}, "
            f"config expects {(cfg.channels, cfg.samples)}"
        )
    a, k, n_seq = cfg.alphabet_size, cfg.query_size, cfg.max_sequences
    p = np.full(a, 1.0 / a, dtype=np.float64)
    initial = p.copy()
    queries = np.zeros((n_seq, k), dtype=np.int64)
    log_probs = np.zeros(n_seq, dtype=np.float64)
    beliefs = np.zeros((n_seq, a), dtype=np.float64)
    for n in range(n_seq):
        q = simulator.sample_query(p, k, rng)
        log_probs[n] = simulator.query_log_prob(p, q)
        responses = simulator.draw_responses(q, target, pool, rng)
        scores, _ = binary_forward(store, cfg, responses.astype(store.dtype, copy=False))
        p = bayes_update(p, q, scores)
        queries[n] = q
        beliefs[n] = p
    return TrialTrace(target=int(target), initial_belief=initial, queries=queries,
                      query_log_probs=log_probs, beliefs=beliefs)


class RBPolicy:
    """Frozen-parameter recursive-Bayes policy for the evaluation harness."""

    name = "rb1d"

    def __init__(self, store: ParamStore, cfg: RBConfig):
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
        return run_trial_rb(self.store, self.cfg, target, pool, rng).beliefs


def save_rb_checkpoint(store: ParamStore, cfg: RBConfig, directory,
                       extra: dict | None = None):
    config = {"kind": "rb1d", "model": cfg.to_dict()}
    if extra:
        config.update(extra)
    return tensor.save_checkpoint(store, directory, config=config)


def load_rb_checkpoint(directory):
    store, config = tensor.load_checkpoint(directory)
    if not config or config.get("kind") != "rb1d":
        raise ConfigurationError(f"checkpoint at {directory} is not an rb1d model")
    cfg = RBConfig.from_dict(config["model"])
    expected = init_rb_params(cfg, seed=0)
    for name in expected.names():
        if name not in store.names():
            raise DimensionError(f"checkpoint missing parameter '{name}'")
        if store.value(name).shape != expected.value(name).shape:
            raise DimensionError(
                f"checkpoint parameter '{name}' has shape {store.value(name).shape}, "
                f"config implies {expected.value(name).shape}"
            )
    return store, cfg, config
