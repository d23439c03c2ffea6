"""Command-line entry point: gen-data / train / eval / report.

Configuration is a flat set of dotted keys with built-in defaults, optionally
overridden by a ``key = value`` config file and then by command-line flags.
Every run writes the fully resolved configuration next to its outputs.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import evaluation, model as model_mod, rb as rb_mod, simulator, training
from .errors import ConfigurationError, DataError, MarkovTyperError

SEED_ENV_VAR = "MARKOVTYPER_SEED"

METHODS = ("markovtype", "rb1d")

_DEFAULT_CONV = "8:7:2,16:5:2,16:5:1,32:3:1,32:3:1"

# key -> (type tag, default); type tags: int, float, str, optint, optfloat
CONFIG_SCHEMA = {
    "model.alphabet_size": ("int", 28),
    "model.query_size": ("int", 10),
    "model.max_sequences": ("int", 10),
    "model.channels": ("int", 4),
    "model.samples": ("int", 64),
    "model.feature_len": ("int", 64),
    "model.hidden_len": ("int", 128),
    "model.conv_spec": ("str", _DEFAULT_CONV),
    "synth.channels": ("int", 4),
    "synth.samples": ("int", 64),
    "synth.separation": ("float", 3.0),
    "synth.count_target": ("int", 300),
    "synth.count_nontarget": ("int", 300),
    "synth.seed": ("int", 0),
    "train.learning_rate": ("float", 0.001),
    "train.epochs": ("optint", None),  # None -> 200 (markovtype) / 25 (rb1d)
    "train.decay": ("float", 0.97),
    "train.batch_size": ("int", 28),
    "train.episodes": ("int", 1),
    "train.lambda": ("optfloat", None),
    "train.discount": ("str", "linear"),
    "train.seed": ("int", 0),
    "train.trials_per_epoch": ("int", 280),
    "train.val_trials": ("int", 56),
    "train.val_fraction": ("float", 0.1),
    "train.init_policy": ("str", "glorot"),
    "session.trials": ("int", 1000),
    "session.tau": ("float", 0.8),
    "session.seed": ("int", 0),
    "session.mode": ("str", "both"),
}


def _coerce(key: str, raw: str):
    tag = CONFIG_SCHEMA[key][0]
    raw = raw.strip()
    try:
        if tag in ("optint", "optfloat") and raw.lower() in ("none", ""):
            return None
        if tag in ("int", "optint"):
            return int(raw)
        if tag in ("float", "optfloat"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config key '{key}': cannot parse value '{raw}'") from exc


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got '{stripped}'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigurationError(f"{path}:{lineno}: unknown config key '{key}'")
        values[key] = _coerce(key, raw)
    return values


def parse_conv_spec(text: str) -> tuple:
    layers = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigurationError(
                f"conv spec layer '{part.strip()}' must be channels:kernel:stride"
            )
        try:
            layers.append(tuple(int(f) for f in fields))
        except ValueError as exc:
            raise ConfigurationError(f"conv spec layer '{part.strip()}' is not numeric") from exc
    return tuple(layers)


def conv_spec_to_text(spec) -> str:
    return ",".join(":".join(str(v) for v in layer) for layer in spec)


class RunConfig:
    """Resolved flat configuration; tracks which keys were set explicitly."""

    def __init__(self, args):
        self.values = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
        self.explicit: set[str] = set()
        if getattr(args, "config", None):
            for key, value in parse_config_file(args.config).items():
                self.values[key] = value
                self.explicit.add(key)

    def set_flag(self, key: str, value) -> None:
        if value is not None:
            self.values[key] = value
            self.explicit.add(key)

    def apply_seed(self, key: str, flag_value) -> None:
        """Flag > config file > environment fallback > default."""
        if flag_value is not None:
            self.set_flag(key, flag_value)
        elif key not in self.explicit and os.environ.get(SEED_ENV_VAR):
            self.values[key] = _coerce(key, os.environ[SEED_ENV_VAR])

    def __getitem__(self, key: str):
        return self.values[key]

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"{key} = {self.values[key]}" for key in sorted(self.values)]
        path.write_text("\n".join(lines) + "\n")


def _model_config(cfg: RunConfig) -> model_mod.ModelConfig:
    return model_mod.ModelConfig(
        alphabet_size=cfg["model.alphabet_size"],
        query_size=cfg["model.query_size"],
        max_sequences=cfg["model.max_sequences"],
        channels=cfg["model.channels"],
        samples=cfg["model.samples"],
        feature_len=cfg["model.feature_len"],
        hidden_len=cfg["model.hidden_len"],
        conv_spec=parse_conv_spec(cfg["model.conv_spec"]),
    )


def _rb_config(cfg: RunConfig) -> rb_mod.RBConfig:
    return rb_mod.RBConfig(
        alphabet_size=cfg["model.alphabet_size"],
        query_size=cfg["model.query_size"],
        max_sequences=cfg["model.max_sequences"],
        channels=cfg["model.channels"],
        samples=cfg["model.samples"],
        conv_spec=parse_conv_spec(cfg["model.conv_spec"]),
    )


def _adopt_pool_dims(cfg: RunConfig, pool) -> None:
    """Dataset dimensions win unless the model dims were set explicitly."""
    if "model.channels" not in cfg.explicit:
        cfg.values["model.channels"] = pool.channels
    if "model.samples" not in cfg.explicit:
        cfg.values["model.samples"] = pool.samples


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = RunConfig(args)
    cfg.set_flag("synth.separation", args.delta)
    cfg.apply_seed("synth.seed", args.seed)
    synth = simulator.SynthConfig(
        channels=cfg["synth.channels"],
        samples=cfg["synth.samples"],
        separation=cfg["synth.separation"],
        count_target=cfg["synth.count_target"],
        count_nontarget=cfg["synth.count_nontarget"],
        seed=cfg["synth.seed"],
    )
    out = Path(args.out)
    simulator.save_pools(simulator.synth_pools(synth), out)
    cfg.write(out / "config.txt")
    print(f"wrote dataset to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig(args)
    cfg.set_flag("train.discount", args.discount)
    cfg.set_flag("train.lambda", args.lam)
    cfg.set_flag("train.epochs", args.epochs)
    cfg.apply_seed("train.seed", args.seed)
    pool = simulator.load_pools(args.data)
    _adopt_pool_dims(cfg, pool)
    out = Path(args.out)

    if args.method == "markovtype":
        epochs = cfg["train.epochs"] if cfg["train.epochs"] is not None else 200
        model_cfg = _model_config(cfg)
        spec = training.DiscountSpec(cfg["train.discount"], model_cfg.max_sequences)
        train_cfg = training.TrainConfig(
            discount=spec,
            learning_rate=cfg["train.learning_rate"],
            epochs=epochs,
            decay=cfg["train.decay"],
            batch_size=cfg["train.batch_size"],
            episodes=cfg["train.episodes"],
            lam=cfg["train.lambda"],
            seed=cfg["train.seed"],
            trials_per_epoch=cfg["train.trials_per_epoch"],
            val_trials=cfg["train.val_trials"],
            val_fraction=cfg["train.val_fraction"],
            init_policy=cfg["train.init_policy"],
        )
        result = training.train(pool, model_cfg, train_cfg)
        model_mod.save_model_checkpoint(
            result.params, model_cfg, out / "checkpoint",
            extra={"discount": spec.kind, "lambda": train_cfg.resolved_lambda(),
                   "seed": train_cfg.seed},
        )
    else:
        epochs = cfg["train.epochs"] if cfg["train.epochs"] is not None else 25
        rb_cfg = _rb_config(cfg)
        rb_train = rb_mod.RBTrainConfig(
            epochs=epochs,
            learning_rate=cfg["train.learning_rate"],
            decay=cfg["train.decay"],
            batch_size=cfg["train.batch_size"],
            seed=cfg["train.seed"],
            val_fraction=cfg["train.val_fraction"],
        )
        result = rb_mod.train_binary(pool, rb_cfg, rb_train)
        rb_mod.save_rb_checkpoint(result.params, rb_cfg, out / "checkpoint",
                                  extra={"discount": "", "seed": rb_train.seed})

    training.write_history_csv(result.history, out / "history.csv")
    cfg.values["train.epochs"] = epochs
    cfg.write(out / "config.txt")
    final = result.history[-1]
    print(f"trained {args.method}: final val accuracy {final.val_accuracy:.4f}")
    return 0


def _load_policy(checkpoint_dir):
    manifest = Path(checkpoint_dir) / "manifest.json"
    if not manifest.exists():
        raise DataError(f"checkpoint not found: {manifest}")
    import json

    kind = json.loads(manifest.read_text()).get("config", {}).get("kind")
    if kind == "markovtype":
        store, cfg, config = model_mod.load_model_checkpoint(checkpoint_dir)
        return model_mod.MarkovTypePolicy(store, cfg), config
    if kind == "rb1d":
        store, cfg, config = rb_mod.load_rb_checkpoint(checkpoint_dir)
        return rb_mod.RBPolicy(store, cfg), config
    raise DataError(f"checkpoint at {checkpoint_dir} has unknown kind '{kind}'")


def cmd_eval(args) -> int:
    cfg = RunConfig(args)
    cfg.set_flag("session.tau", args.tau)
    cfg.set_flag("session.trials", args.trials)
    cfg.set_flag("session.mode", args.mode)
    cfg.apply_seed("session.seed", args.seed)
    mode = cfg["session.mode"]
    if mode not in ("threshold", "sweep", "both"):
        raise ConfigurationError(f"mode must be threshold|sweep|both, got '{mode}'")
    session_cfg = evaluation.SessionConfig(
        num_targets=cfg["session.trials"],
        threshold=cfg["session.tau"],
        seed=cfg["session.seed"],
    )
    policy, config = _load_policy(args.checkpoint)
    pool = simulator.load_pools(args.data)
    if (pool.channels, pool.samples) != (policy.cfg.channels, policy.cfg.samples):
        raise DataError(
            f"dataset responses are {(pool.channels, pool.samples)} but the "
            f"checkpoint expects {(policy.cfg.channels, policy.cfg.samples)}"
        )
    out = Path(args.out)

    trajectories = evaluation.collect_trajectories(policy, pool, session_cfg)
    result = None
    sweep = None
    if mode in ("threshold", "both"):
        result = evaluation.run_session(policy, pool, session_cfg, trajectories)
    if mode in ("sweep", "both"):
        sweep = evaluation.sweep_no_threshold(policy, pool, session_cfg, trajectories)

    discount = config.get("discount", "") or ""
    record = evaluation.record_from_results(
        policy.name, discount, session_cfg.seed, policy.num_params,
        config={"trials": session_cfg.num_targets, "tau": session_cfg.threshold,
                "seed": session_cfg.seed, "mode": mode},
        result=result, sweep=sweep,
    )
    tag = discount or "none"
    evaluation.write_session_json(
        record, out / f"session_{policy.name}_{tag}_seed{session_cfg.seed}.json"
    )
    evaluation.export_reports([record], out)
    cfg.write(out / "config.txt")
    if result is not None:
        print(f"accuracy {result.accuracy:.4f}  n_tau {result.mean_sequences:.3f}  "
              f"itr/selection {result.itr_selection:.3f}")
    if sweep is not None:
        print("sweep accuracy: " + " ".join(f"{v:.3f}" for v in sweep))
    return 0


def cmd_report(args) -> int:
    indir = Path(args.indir)
    if not indir.exists():
        raise DataError(f"input directory not found: {indir}")
    files = sorted(indir.rglob("session_*.json"))
    if not files:
        raise DataError(f"no session_*.json files under {indir}")
    records = [evaluation.read_session_json(path) for path in files]
    paths = evaluation.export_reports(records, args.out)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markovtyper",
        description="Simulated RSVP typing: data generation, training, evaluation, reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic response-pool dataset")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    gen.add_argument("--delta", type=float, help="class separation (synth.separation)")
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a typing model on a dataset")
    tr.add_argument("--config")
    tr.add_argument("--data", required=True, help="dataset directory or manifest path")
    tr.add_argument("--out", required=True)
    tr.add_argument("--method", required=True, choices=METHODS)
    tr.add_argument("--discount", choices=training.DISCOUNT_KINDS)
    tr.add_argument("--lambda", dest="lam", type=float)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="run the threshold/sweep evaluation protocol")
    ev.add_argument("--config")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--mode", choices=("threshold", "sweep", "both"))
    ev.add_argument("--tau", type=float)
    ev.add_argument("--trials", type=int)
    ev.add_argument("--seed", type=int)
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="merge per-seed session files into report CSVs")
    rep.add_argument("--in", dest="indir", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MarkovTyperError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
