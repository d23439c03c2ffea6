"""Rewards, discount schedules, the hybrid supervised + policy-gradient loss,
and the training loop.

Per trial the loss is

    L = L_action + lambda * (L_baseline + L_reinforce)

with L_action the negative log-likelihood of the target under the final
belief, L_baseline the mean squared error between the baseline head and the
discounted reward-to-go, and L_reinforce the score-function term
-sum_n log pi_n * (R_n - b_n). The advantage (R_n - b_n) is treated as a
constant in L_reinforce, and L_baseline trains the baseline head only; the
hidden state is not penalized through it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as model_mod
from .errors import ConfigurationError, DivergenceError
from .model import ModelConfig, Rollout, TrialTrace
from .simulator import ResponsePool, derived_rng
from .tensor import AdamState, ParamStore, adam_step, decay_lr

DISCOUNT_KINDS = ("linear", "inv", "inv2", "inv3")

# Regularization weight per discount kind, used when TrainConfig.lam is None.
DISCOUNT_LAMBDA = {"linear": 0.02, "inv": 0.02, "inv2": 0.01, "inv3": 0.1}

LAMBDA_GRID = tuple(round(0.01 * k, 2) for k in range(1, 11))


def discount_weights(kind: str, horizon: int) -> np.ndarray:
    """Per-sequence discount d(n) for n = 1..horizon."""
    if kind not in DISCOUNT_KINDS:
        raise ConfigurationError(f"unknown discount kind '{kind}', pick one of {DISCOUNT_KINDS}")
    n = np.arange(1, horizon + 1, dtype=np.float64)
    if kind == "linear":
        return (2 * horizon - n - 1) / horizon
    if kind == "inv":
        return 1.0 / n
    if kind == "inv2":
        return 1.0 / n**2
    return 1.0 / n**3


@dataclass(frozen=True)
class DiscountSpec:
    kind: str
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError(f"discount horizon must be >= 1, got {self.horizon}")
        w = discount_weights(self.kind, self.horizon)
        if np.any(w <= 0):
            raise ConfigurationError(
                f"discount '{self.kind}' is not positive over horizon {self.horizon}"
            )

    def weights(self) -> np.ndarray:
        return discount_weights(self.kind, self.horizon)


@dataclass(frozen=True)
class TrainConfig:
    discount: DiscountSpec
    learning_rate: float = 0.001
    epochs: int = 200
    decay: float = 0.97
    batch_size: int = 28
    episodes: int = 1
    lam: float | None = None  # None -> DISCOUNT_LAMBDA[discount.kind]
    seed: int = 0
    trials_per_epoch: int = 280
    val_trials: int = 56
    val_fraction: float = 0.1
    init_policy: str = "glorot"

    def __post_init__(self):
        if self.lam is not None and self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.episodes != 1:
            raise ConfigurationError("only single-episode trials (episodes=1) are supported")
        if self.epochs < 1 or self.trials_per_epoch < 1 or self.val_trials < 1:
            raise ConfigurationError("epochs, trials_per_epoch and val_trials must be >= 1")
        if self.init_policy not in model_mod.INIT_POLICIES:
            raise ConfigurationError(
                f"unknown init policy '{self.init_policy}', pick one of {model_mod.INIT_POLICIES}"
            )

    def resolved_lambda(self) -> float:
        return DISCOUNT_LAMBDA[self.discount.kind] if self.lam is None else self.lam


@dataclass
class RewardTrack:
    """Raw and discounted per-sequence rewards plus the reward-to-go."""

    raw: np.ndarray          # r_n in {0, 1}
    discounted: np.ndarray   # r_n * d(n)
    reward_to_go: np.ndarray  # R_n = sum_{n' >= n} r_n' d(n')


def per_sequence_rewards(beliefs: np.ndarray, targets, spec: DiscountSpec) -> RewardTrack:
    """Reward 1 where argmax of the belief hits the target (ties: lowest index).

    Accepts a single (N, A) trace or a batched (B, N, A) stack; the returned
    arrays match the input's leading shape.
    """
    beliefs = np.asarray(beliefs)
    targets = np.asarray(targets, dtype=np.int64)
    predicted = beliefs.argmax(axis=-1)
    if beliefs.ndim == 3:
        raw = (predicted == targets[:, None]).astype(np.float64)
    else:
        raw = (predicted == targets).astype(np.float64)
    discounted = raw * spec.weights()
    reward_to_go = np.flip(np.cumsum(np.flip(discounted, axis=-1), axis=-1), axis=-1)
    return RewardTrack(raw=raw, discounted=discounted, reward_to_go=reward_to_go)


def per_trial_rewards(trace: TrialTrace, target: int, spec: DiscountSpec) -> RewardTrack:
    return per_sequence_rewards(trace.beliefs, target, spec)


# ---------------------------------------------------------------------------
# loss values (single trial); the trainer computes their gradients in batch
# ---------------------------------------------------------------------------


def loss_action(trace: TrialTrace, target: int) -> float:
    """Negative log-likelihood of the target under the final belief."""
    return float(-np.log(np.float64(trace.beliefs[-1, target])))


def loss_baseline(track: RewardTrack, trace: TrialTrace) -> float:
    """Mean squared error between baseline values and the reward-to-go."""
    diff = track.reward_to_go - np.asarray(trace.baselines, dtype=np.float64)
    return float(np.mean(diff * diff))


def loss_reinforce(track: RewardTrack, trace: TrialTrace) -> float:
    """-sum_n log pi_n * (R_n - b_n); the advantage is treated as constant."""
    adv = track.reward_to_go - np.asarray(trace.baselines, dtype=np.float64)
    return float(-(np.asarray(trace.query_log_probs, dtype=np.float64) * adv).sum())


def loss_total(action: float, baseline: float, reinforce: float, lam: float) -> float:
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    return action + lam * (baseline + reinforce)


@dataclass
class BatchLoss:
    action: float
    baseline: float
    reinforce: float
    total: float


def batch_loss_and_grads(store: ParamStore, cfg: ModelConfig, rollout: Rollout,
                         track: RewardTrack, lam: float) -> BatchLoss:
    """Loss of a cached batch rollout; accumulates all parameter gradients.

    The three gradient routes: the action loss enters at the final classifier
    logits, the reinforce term at each recorded query log-probability, and
    the baseline term at the baseline head only.
    """
    n_rows, n_seq = rollout.baselines.shape
    final = rollout.beliefs[:, -1].astype(np.float64)
    target_prob = final[np.arange(n_rows), rollout.targets]
    action = float(-np.log(target_prob).mean())

    baselines = rollout.baselines.astype(np.float64)
    adv = track.reward_to_go - baselines
    baseline = float((adv * adv).mean())
    reinforce = float(-(rollout.log_probs * adv).sum(axis=1).mean())
    total = loss_total(action, baseline, reinforce, lam)

    onehot = np.zeros_like(rollout.beliefs[:, -1])
    onehot[np.arange(n_rows), rollout.targets] = 1.0
    final_logit_grad = (rollout.beliefs[:, -1] - onehot) / n_rows
    log_prob_grads = (lam / n_rows) * (-adv)
    baseline_grads = (lam / n_rows) * (2.0 / n_seq) * (baselines - track.reward_to_go)
    model_mod.rollout_backward(
        store, cfg, rollout,
        final_logit_grad=final_logit_grad,
        log_prob_grads=log_prob_grads,
        baseline_grads=baseline_grads,
    )
    return BatchLoss(action=action, baseline=baseline, reinforce=reinforce, total=total)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_accuracy: float
    learning_rate: float


@dataclass
class TrainResult:
    params: ParamStore
    history: list = field(default_factory=list)
    config: TrainConfig | None = None


def write_history_csv(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy", "learning_rate"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_accuracy),
                             repr(row.learning_rate)])
    return path


def _final_accuracy(store, cfg, pool, rng, n_trials: int) -> float:
    """No-threshold accuracy of argmax at the last sequence over fresh trials."""
    targets = rng.integers(cfg.alphabet_size, size=n_trials)
    ro = model_mod.run_trials(store, cfg, pool, targets, rng=rng)
    return float((ro.beliefs[:, -1].argmax(axis=1) == targets).mean())


def train(pool: ResponsePool, model_cfg: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Train the recursive classifier on simulated typing trials.

    Each epoch runs ``trials_per_epoch // batch_size`` optimizer steps on
    batches of freshly simulated trials with uniform targets, then decays the
    learning rate and measures validation accuracy on a held-out pool split.
    """
    if cfg.discount.horizon != model_cfg.max_sequences:
        raise ConfigurationError(
            f"discount horizon {cfg.discount.horizon} must equal "
            f"max_sequences {model_cfg.max_sequences}"
        )
    lam = cfg.resolved_lambda()
    train_pool, val_pool = pool.split(cfg.val_fraction, derived_rng(cfg.seed, 1))
    store = model_mod.init_model_params(model_cfg, seed=cfg.seed,
                                        init_policy=cfg.init_policy)
    adam = AdamState(learning_rate=cfg.learning_rate)
    trng = derived_rng(cfg.seed, 2)
    spec = cfg.discount
    batches = max(1, cfg.trials_per_epoch // cfg.batch_size)

    history: list[HistoryRow] = []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch in range(batches):
            targets = trng.integers(model_cfg.alphabet_size, size=cfg.batch_size)
            rollout = model_mod.run_trials(store, model_cfg, train_pool, targets,
                                           rng=trng, keep_caches=True)
            track = per_sequence_rewards(rollout.beliefs, targets, spec)
            store.zero_grads()
            loss = batch_loss_and_grads(store, model_cfg, rollout, track, lam)
            if not np.isfinite(loss.total):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, batch {batch}"
                )
            adam_step(store, adam)
            epoch_losses.append(loss.total)
        val_acc = _final_accuracy(store, model_cfg, val_pool,
                                  derived_rng(cfg.seed, 3, epoch), cfg.val_trials)
        history.append(HistoryRow(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                                  val_accuracy=val_acc, learning_rate=adam.learning_rate))
        decay_lr(adam, cfg.decay)
    return TrainResult(params=store, history=history, config=cfg)


def tune_lambda(grid, pool: ResponsePool, model_cfg: ModelConfig, cfg: TrainConfig):
    """Train one model per lambda; returns (best, {lambda: val_accuracy}).

    Best = highest final validation accuracy, ties broken toward smaller
    lambda.
    """
    grid = list(grid)
    if not grid:
        raise ConfigurationError("lambda grid is empty")
    scores: dict[float, float] = {}
    best_lam = None
    best_acc = -1.0
    for lam in sorted(grid):
        result = train(pool, model_cfg, replace(cfg, lam=lam))
        acc = result.history[-1].val_accuracy
        scores[lam] = acc
        if acc > best_acc:
            best_acc = acc
            best_lam = lam
    return best_lam, scores
