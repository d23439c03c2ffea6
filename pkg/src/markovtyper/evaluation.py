"""Threshold-stopping test protocol, information-transfer-rate metrics, and
CSV report generation.

A policy object supplies ``trial_beliefs(target, pool, rng) -> (N, A)`` plus
``alphabet_size`` / ``query_size`` / ``max_sequences`` / ``num_params`` /
``name`` attributes. Each trial runs its full belief trajectory once; the
threshold scan then stops at the first sequence whose maximum posterior
reaches tau (or at the last sequence), which makes stop times structurally
monotone in tau under shared randomness.
"""

from __future__ import annotations

import json
import math
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .simulator import ResponsePool, derived_rng


@dataclass(frozen=True)
class SessionConfig:
    """One evaluation session: T typing trials under decision threshold tau."""

    num_targets: int = 1000
    threshold: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigurationError(
                f"decision threshold must be in (0, 1], got {self.threshold}"
            )
        if self.num_targets < 1:
            raise ConfigurationError(f"number of targets must be >= 1, got {self.num_targets}")


def itr(alphabet_size: int, accuracy: float) -> float:
    """Bits per selection at the given accuracy over the alphabet."""
    if alphabet_size < 2:
        raise ConfigurationError(f"alphabet size must be >= 2, got {alphabet_size}")
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must be in [0, 1], got {accuracy}")
    bits = math.log2(alphabet_size)
    if accuracy > 0.0:
        bits += accuracy * math.log2(accuracy)
    if accuracy < 1.0:
        bits += (1.0 - accuracy) * math.log2((1.0 - accuracy) / (alphabet_size - 1))
    return bits


def itr_per_sequence(alphabet_size: int, accuracy: float, mean_sequences: float) -> float:
    """Bits per sequence: ITR per selection divided by the mean stop time."""
    if mean_sequences < 1.0:
        raise ValueError(f"mean sequences must be >= 1, got {mean_sequences}")
    return itr(alphabet_size, accuracy) / mean_sequences


def stop_scan(beliefs: np.ndarray, threshold: float):
    """First sequence whose max posterior reaches the threshold, else the last.

    Returns (stop_sequence [1-based], decision).
    """
    maxes = np.asarray(beliefs).max(axis=1)
    hits = np.nonzero(maxes >= threshold)[0]
    stop = int(hits[0]) if hits.size else beliefs.shape[0] - 1
    return stop + 1, int(np.asarray(beliefs)[stop].argmax())


@dataclass
class Trajectories:
    """Full no-stopping belief trajectories for a batch of seeded trials."""

    targets: np.ndarray  # (T,)
    beliefs: np.ndarray  # (T, N, A) float64


def collect_trajectories(policy, pool: ResponsePool, cfg: SessionConfig) -> Trajectories:
    """Run cfg.num_targets independent trials; each owns a derived RNG stream."""
    targets = derived_rng(cfg.seed, 0).integers(policy.alphabet_size, size=cfg.num_targets)
    beliefs = np.zeros((cfg.num_targets, policy.max_sequences, policy.alphabet_size))
    for i, target in enumerate(targets):
        beliefs[i] = policy.trial_beliefs(int(target), pool, derived_rng(cfg.seed, 1, i))
    return Trajectories(targets=targets, beliefs=beliefs)


@dataclass
class SessionResult:
    """Aggregates of one threshold-stopping session."""

    targets: np.ndarray
    decisions: np.ndarray
    stop_sequences: np.ndarray
    accuracy: float
    mean_sequences: float
    itr_selection: float
    itr_sequence: float
    correct_histogram: np.ndarray    # decisions per stop sequence, correct
    incorrect_histogram: np.ndarray


def run_session(policy, pool: ResponsePool, cfg: SessionConfig,
                trajectories: Trajectories | None = None) -> SessionResult:
    """Threshold-stopping protocol: stop when max posterior >= tau or n = N."""
    if trajectories is None:
        trajectories = collect_trajectories(policy, pool, cfg)
    n_seq = trajectories.beliefs.shape[1]
    alphabet = trajectories.beliefs.shape[2]
    stops = np.zeros(cfg.num_targets, dtype=np.int64)
    decisions = np.zeros(cfg.num_targets, dtype=np.int64)
    for i in range(cfg.num_targets):
        stops[i], decisions[i] = stop_scan(trajectories.beliefs[i], cfg.threshold)
    correct = decisions == trajectories.targets
    accuracy = float(correct.mean())
    mean_sequences = float(stops.sum()) / cfg.num_targets
    itr_sel = itr(alphabet, accuracy)
    return SessionResult(
        targets=trajectories.targets,
        decisions=decisions,
        stop_sequences=stops,
        accuracy=accuracy,
        mean_sequences=mean_sequences,
        itr_selection=itr_sel,
        itr_sequence=itr_sel / mean_sequences,
        correct_histogram=np.bincount(stops[correct] - 1, minlength=n_seq),
        incorrect_histogram=np.bincount(stops[~correct] - 1, minlength=n_seq),
    )


def sweep_no_threshold(policy, pool: ResponsePool, cfg: SessionConfig,
                       trajectories: Trajectories | None = None) -> np.ndarray:
    """Accuracy of argmax at every sequence with no early stopping: (N,)."""
    if trajectories is None:
        trajectories = collect_trajectories(policy, pool, cfg)
    predicted = trajectories.beliefs.argmax(axis=2)  # (T, N)
    return (predicted == trajectories.targets[:, None]).mean(axis=0)


# ---------------------------------------------------------------------------
# session records and report CSVs
# ---------------------------------------------------------------------------


@dataclass
class SessionRecord:
    """One (method, discount, seed) evaluation outcome, JSON-serializable."""

    method: str
    discount: str
    seed: int
    num_params: int
    config: dict = field(default_factory=dict)
    accuracy: float | None = None
    mean_sequences: float | None = None
    itr_selection: float | None = None
    itr_sequence: float | None = None
    correct_histogram: list | None = None
    incorrect_histogram: list | None = None
    sweep_accuracy: list | None = None

    def label(self) -> str:
        return f"{self.method}({self.discount})" if self.discount else self.method


def record_from_results(method: str, discount: str, seed: int, num_params: int,
                        config: dict, result: SessionResult | None = None,
                        sweep: np.ndarray | None = None) -> SessionRecord:
    rec = SessionRecord(method=method, discount=discount, seed=seed,
                        num_params=num_params, config=config)
    if result is not None:
        rec.accuracy = result.accuracy
        rec.mean_sequences = result.mean_sequences
        rec.itr_selection = result.itr_selection
        rec.itr_sequence = result.itr_sequence
        rec.correct_histogram = [int(v) for v in result.correct_histogram]
        rec.incorrect_histogram = [int(v) for v in result.incorrect_histogram]
    if sweep is not None:
        rec.sweep_accuracy = [float(v) for v in sweep]
    return rec


_RECORD_KEYS = ("method", "discount", "seed", "num_params", "config", "accuracy",
                "mean_sequences", "itr_selection", "itr_sequence",
                "correct_histogram", "incorrect_histogram", "sweep_accuracy")


def write_session_json(record: SessionRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {key: getattr(record, key) for key in _RECORD_KEYS}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_session_json(path) -> SessionRecord:
    path = Path(path)
    payload = json.loads(path.read_text())
    missing = [key for key in _RECORD_KEYS if key not in payload]
    if missing:
        raise DataError(f"session file {path} is missing fields {missing}")
    return SessionRecord(**{key: payload[key] for key in _RECORD_KEYS})


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def export_reports(records, outdir) -> dict:
    """Write the report CSVs from per-seed session records.

    summary.csv    method,discount,num_params + mean/std of the four metrics
    histogram.csv  method,sequence,correct_count,incorrect_count (summed)
    sweep.csv      method,sequence,mean_accuracy,std  (no-threshold accuracy)
    threshold_accuracy.csv  same schema, accuracy of decisions made at each
                            sequence under the threshold
    """
    records = list(records)
    if not records:
        raise DataError("no session records to report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    groups: dict[tuple, list[SessionRecord]] = {}
    for rec in records:
        groups.setdefault((rec.method, rec.discount), []).append(rec)

    summary_rows = []
    histogram_rows = []
    sweep_rows = []
    threshold_rows = []
    for (method, discount), recs in sorted(groups.items()):
        label = recs[0].label()
        with_session = [r for r in recs if r.accuracy is not None]
        if with_session:
            fields = {}
            for name in ("itr_selection", "accuracy", "mean_sequences", "itr_sequence"):
                fields[name] = _mean_std([getattr(r, name) for r in with_session])
            summary_rows.append([
                method, discount or "-", recs[0].num_params,
                repr(fields["itr_selection"][0]), repr(fields["itr_selection"][1]),
                repr(fields["accuracy"][0]), repr(fields["accuracy"][1]),
                repr(fields["mean_sequences"][0]), repr(fields["mean_sequences"][1]),
                repr(fields["itr_sequence"][0]), repr(fields["itr_sequence"][1]),
            ])
            n_seq = len(with_session[0].correct_histogram)
            correct = np.zeros(n_seq, dtype=np.int64)
            incorrect = np.zeros(n_seq, dtype=np.int64)
            for r in with_session:
                correct += np.asarray(r.correct_histogram, dtype=np.int64)
                incorrect += np.asarray(r.incorrect_histogram, dtype=np.int64)
            for n in range(n_seq):
                histogram_rows.append([label, n + 1, int(correct[n]), int(incorrect[n])])
            for n in range(n_seq):
                per_seed = [
                    (r.correct_histogram[n]) / (r.correct_histogram[n] + r.incorrect_histogram[n])
                    for r in with_session
                    if r.correct_histogram[n] + r.incorrect_histogram[n] > 0
                ]
                if per_seed:
                    mean, std = _mean_std(per_seed)
                    threshold_rows.append([label, n + 1, repr(mean), repr(std)])
        with_sweep = [r for r in recs if r.sweep_accuracy is not None]
        if with_sweep:
            stacked = np.asarray([r.sweep_accuracy for r in with_sweep])
            for n in range(stacked.shape[1]):
                mean, std = _mean_std(stacked[:, n])
                sweep_rows.append([label, n + 1, repr(mean), repr(std)])

    paths = {}
    if summary_rows:
        paths["summary"] = outdir / "summary.csv"
        _write_csv(paths["summary"],
                   ["method", "discount", "num_params",
                    "itr_selection_mean", "itr_selection_std",
                    "accuracy_mean", "accuracy_std",
                    "n_tau_mean", "n_tau_std",
                    "itr_sequence_mean", "itr_sequence_std"],
                   summary_rows)
        paths["histogram"] = outdir / "histogram.csv"
        _write_csv(paths["histogram"],
                   ["method", "sequence", "correct_count", "incorrect_count"],
                   histogram_rows)
        paths["threshold_accuracy"] = outdir / "threshold_accuracy.csv"
        _write_csv(paths["threshold_accuracy"],
                   ["method", "sequence", "mean_accuracy", "std"],
                   threshold_rows)
    if sweep_rows:
        paths["sweep"] = outdir / "sweep.csv"
        _write_csv(paths["sweep"],
                   ["method", "sequence", "mean_accuracy", "std"],
                   sweep_rows)
    return paths
