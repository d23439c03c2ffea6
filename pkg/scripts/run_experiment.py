#!/usr/bin/env python3
"""Full desk-scale experiment: train both methods over 5 seeded splits,
evaluate with and without the decision threshold, and merge the reports.

    python scripts/run_experiment.py --out runs/exp1
    python scripts/run_experiment.py --out runs/quick --quick

Figures can then be rendered from the merged CSVs with the `plots` tool:

    plots --kind sweep --in runs/exp1/report/sweep.csv --out fig_sweep.png
    plots --kind histogram --in runs/exp1/report/histogram.csv --out fig_hist.png
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from markovtyper import evaluation, model, rb, simulator, training  # noqa: E402

REDUCED_CONV = ((8, 2, 1), (16, 2, 1), (16, 2, 1), (32, 2, 1), (32, 2, 1))


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--delta", type=float, default=1.0,
                        help="class separation of the synthetic pools")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--trials", type=int, default=1000)
    parser.add_argument("--tau", type=float, default=0.8)
    parser.add_argument("--epochs", type=int, default=200,
                        help="classifier training epochs per seed")
    parser.add_argument("--discounts", nargs="+", default=["linear"],
                        choices=training.DISCOUNT_KINDS)
    parser.add_argument("--quick", action="store_true",
                        help="tiny smoke-scale run (minutes, not representative)")
    return parser.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    session_dir = out / "sessions"
    if args.quick:
        args.seeds = args.seeds[:2]
        args.trials = 100
        args.epochs = 10

    model_cfg = model.ModelConfig(alphabet_size=28, query_size=10, max_sequences=10,
                                  channels=2, samples=8, feature_len=32, hidden_len=64,
                                  conv_spec=REDUCED_CONV)
    rb_cfg = rb.RBConfig(alphabet_size=28, query_size=10, max_sequences=10,
                         channels=2, samples=8, conv_spec=REDUCED_CONV)

    records = []
    for seed in args.seeds:
        train_pool = simulator.synth_pools(simulator.SynthConfig(
            model_cfg.channels, model_cfg.samples, args.delta, 800, 800, seed=seed))
        test_pool = simulator.synth_pools(simulator.SynthConfig(
            model_cfg.channels, model_cfg.samples, args.delta, 2000, 2000, seed=1000 + seed))
        session_cfg = evaluation.SessionConfig(num_targets=args.trials,
                                               threshold=args.tau, seed=seed)

        for kind in args.discounts:
            t0 = time.time()
            tcfg = training.TrainConfig(
                discount=training.DiscountSpec(kind, model_cfg.max_sequences),
                epochs=args.epochs, learning_rate=2e-3, decay=0.995,
                seed=seed, init_policy="preserving")
            result = training.train(train_pool, model_cfg, tcfg)
            policy = model.MarkovTypePolicy(result.params, model_cfg)
            traj = evaluation.collect_trajectories(policy, test_pool, session_cfg)
            record = evaluation.record_from_results(
                policy.name, kind, seed, policy.num_params,
                config={"tau": args.tau, "trials": args.trials, "delta": args.delta},
                result=evaluation.run_session(policy, test_pool, session_cfg, traj),
                sweep=evaluation.sweep_no_threshold(policy, test_pool, session_cfg, traj),
            )
            records.append(record)
            evaluation.write_session_json(
                record, session_dir / f"session_markovtype_{kind}_seed{seed}.json")
            print(f"seed {seed} markovtype[{kind}]: acc {record.accuracy:.3f} "
                  f"n_tau {record.mean_sequences:.2f} ({time.time() - t0:.0f}s)", flush=True)

        t0 = time.time()
        rb_result = rb.train_binary(train_pool, rb_cfg, rb.RBTrainConfig(seed=seed))
        rb_policy = rb.RBPolicy(rb_result.params, rb_cfg)
        traj = evaluation.collect_trajectories(rb_policy, test_pool, session_cfg)
        record = evaluation.record_from_results(
            rb_policy.name, "", seed, rb_policy.num_params,
            config={"tau": args.tau, "trials": args.trials, "delta": args.delta},
            result=evaluation.run_session(rb_policy, test_pool, session_cfg, traj),
            sweep=evaluation.sweep_no_threshold(rb_policy, test_pool, session_cfg, traj),
        )
        records.append(record)
        evaluation.write_session_json(
            record, session_dir / f"session_rb1d_none_seed{seed}.json")
        print(f"seed {seed} rb1d: acc {record.accuracy:.3f} "
              f"n_tau {record.mean_sequences:.2f} ({time.time() - t0:.0f}s)", flush=True)

    paths = evaluation.export_reports(records, out / "report")
    print("\nreports:")
    for name, path in sorted(paths.items()):
        print(f"  {name}: {path}")


if __name__ == "__main__":
    main()
