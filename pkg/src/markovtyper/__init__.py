"""Simulated RSVP typing: a recursive POMDP classifier trained with a hybrid
supervised + policy-gradient objective, a recursive-Bayes competitor, and a
threshold-stopping evaluation harness with information-transfer-rate metrics.
"""

from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    DivergenceError,
    MarkovTyperError,
)
from .evaluation import SessionConfig, itr, itr_per_sequence, run_session, sweep_no_threshold
from .model import MarkovTypePolicy, ModelConfig, init_model_params, run_trial, run_trials
from .rb import RBConfig, RBPolicy, RBTrainConfig, bayes_update, run_trial_rb, train_binary
from .simulator import (
    ResponsePool,
    SynthConfig,
    derived_rng,
    draw_responses,
    load_pools,
    query_log_prob,
    sample_query,
    save_pools,
    synth_pools,
)
from .tensor import AdamState, ParamStore, adam_step, decay_lr, grad_check
from .training import (
    DiscountSpec,
    RewardTrack,
    TrainConfig,
    loss_action,
    loss_baseline,
    loss_reinforce,
    loss_total,
    per_sequence_rewards,
    train,
    tune_lambda,
)

__version__ = "0.1.0"
