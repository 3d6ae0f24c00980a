"""CSV and aligned-markdown report tables."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .metrics import ConfusionMatrix, macro_f1, mcc, per_class_prf


def fmt(value, digits: int = 4) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "nan" if np.isnan(value) else f"{value:.{digits}f}"
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def markdown_table(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |" for r in cells]
    lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines) + "\n"


def emit(path, header, rows) -> str:
    """Write ``path`` (CSV) plus ``path.md`` and return the markdown."""
    write_csv(path, header, rows)
    md = markdown_table(header, rows)
    Path(str(path) + ".md").write_text(md)
    return md


ACCURACY_HEADER = ("Model", "Accuracy", "Accuracy (10% train)", "J/inference")
THROUGHPUT_HEADER = ("Model", "Inferences/s")
HISTORY_HEADER = ("epoch", "loss", "train_acc", "val_acc", "lr")
SWEEP_HEADER = ("T", "accuracy", "delta_vs_half")
PER_CLASS_HEADER = ("Class", "Precision", "Recall", "F1")


def history_rows(history) -> list:
    # full precision for lr so schedules can be checked from the CSV
    return [(r.epoch, r.loss, r.train_acc, r.val_acc, f"{r.lr:.10g}") for r in history]


def sweep_rows(rows) -> list:
    return [(r.T, r.accuracy, r.delta_vs_half) for r in rows]


def fold_table(confusions: list) -> tuple:
    """Rows Accuracy/MCC/F1 by fold, with an Average column."""
    header = ("Metric",) + tuple(f"Fold {i + 1}" for i in range(len(confusions))) + ("Average",)
    rows = []
    for name, fn in (("Accuracy", lambda c: c.accuracy), ("MCC", mcc), ("F1", macro_f1)):
        vals = [fn(c) for c in confusions]
        rows.append((name, *vals, float(np.mean(vals))))
    return header, rows


def class_table(cm: ConfusionMatrix, class_names) -> tuple:
    rows = [(name, p, r, f) for name, (p, r, f) in zip(class_names, per_class_prf(cm))]
    return PER_CLASS_HEADER, rows


def energy_cell(value) -> str:
    """A single J/inference figure, or a ``lower-upper`` range."""
    if isinstance(value, tuple):
        return f"{value[0]:.4f}-{value[1]:.4f}"
    return fmt(value)
