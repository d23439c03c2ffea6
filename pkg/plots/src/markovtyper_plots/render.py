"""Render evaluation CSVs into figures.

Three figure kinds, one per CSV schema:

* ``histogram``            method,sequence,correct_count,incorrect_count
                           stacked correct/incorrect decision counts
* ``threshold-accuracy``   method,sequence,mean_accuracy,std
                           accuracy of decisions made at each sequence
* ``sweep-accuracy``       method,sequence,mean_accuracy,std
                           no-early-stopping accuracy per sequence

The renderer only draws what the CSVs already contain; it performs no
statistics of its own.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

HISTOGRAM_COLUMNS = ["method", "sequence", "correct_count", "incorrect_count"]
ACCURACY_COLUMNS = ["method", "sequence", "mean_accuracy", "std"]

KIND_COLUMNS = {
    "histogram": HISTOGRAM_COLUMNS,
    "threshold-accuracy": ACCURACY_COLUMNS,
    "sweep-accuracy": ACCURACY_COLUMNS,
}

KIND_TITLES = {
    "histogram": "Decisions per sequence",
    "threshold-accuracy": "Accuracy of decisions across sequences (threshold stopping)",
    "sweep-accuracy": "Accuracy across sequences (no early stopping)",
}


class SchemaError(Exception):
    """CSV columns do not match the figure kind."""


def read_rows(path, kind: str):
    expected = KIND_COLUMNS[kind]
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"input CSV not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if header != expected:
            missing = [c for c in expected if c not in header]
            unexpected = [c for c in header if c not in expected]
            raise SchemaError(
                f"{path} does not match the {kind} schema: "
                f"missing columns {missing}, unexpected columns {unexpected}"
            )
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path} has no data rows")
    return rows


def _by_method(rows, methods=None):
    grouped: dict[str, list] = {}
    for row in rows:
        if methods and row["method"] not in methods:
            continue
        grouped.setdefault(row["method"], []).append(row)
    if not grouped:
        raise SchemaError(f"no rows left after filtering methods {methods}")
    for group in grouped.values():
        group.sort(key=lambda r: int(r["sequence"]))
    return grouped


def render_histogram(rows, out_path, methods=None, dpi=150):
    """Stacked correct/incorrect decision counts, one panel per method.

    Returns the total count drawn, which is asserted to equal the CSV sum.
    """
    grouped = _by_method(rows, methods)
    n_panels = len(grouped)
    fig, axes = plt.subplots(1, n_panels, figsize=(4.2 * n_panels, 3.4),
                             squeeze=False, sharey=True)
    drawn_total = 0
    for ax, (method, group) in zip(axes[0], sorted(grouped.items())):
        seqs = [int(r["sequence"]) for r in group]
        correct = [int(r["correct_count"]) for r in group]
        incorrect = [int(r["incorrect_count"]) for r in group]
        ax.bar(seqs, correct, color="tab:blue", label="correct")
        ax.bar(seqs, incorrect, bottom=correct, color="tab:orange", label="incorrect")
        drawn_total += sum(correct) + sum(incorrect)
        ax.set_title(method)
        ax.set_xlabel("sequence")
        ax.set_xticks(seqs)
    axes[0][0].set_ylabel("decisions")
    axes[0][-1].legend(loc="upper right")
    fig.suptitle(KIND_TITLES["histogram"])
    fig.tight_layout()
    fig.savefig(out_path, dpi=dpi)
    plt.close(fig)

    csv_total = sum(int(r["correct_count"]) + int(r["incorrect_count"])
                    for g in grouped.values() for r in g)
    assert drawn_total == csv_total, "rendered bar totals diverge from CSV sums"
    return drawn_total


def render_accuracy(rows, out_path, kind, methods=None, dpi=150):
    """Mean accuracy lines with +-std bands, one line per method."""
    grouped = _by_method(rows, methods)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for method, group in sorted(grouped.items()):
        seqs = [int(r["sequence"]) for r in group]
        mean = [float(r["mean_accuracy"]) for r in group]
        std = [float(r["std"]) for r in group]
        ax.plot(seqs, mean, marker="o", label=method)
        ax.fill_between(seqs,
                        [m - s for m, s in zip(mean, std)],
                        [m + s for m, s in zip(mean, std)],
                        alpha=0.2)
    ax.set_xlabel("sequence")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.legend()
    ax.set_title(KIND_TITLES[kind])
    fig.tight_layout()
    fig.savefig(out_path, dpi=dpi)
    plt.close(fig)
    return len(grouped)


def render(kind: str, in_path, out_path, methods=None, dpi=150):
    rows = read_rows(in_path, kind)
    if kind == "histogram":
        return render_histogram(rows, out_path, methods=methods, dpi=dpi)
    return render_accuracy(rows, out_path, kind, methods=methods, dpi=dpi)
