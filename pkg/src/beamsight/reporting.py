"""Delimited reports and the matplotlib figures rendered beside them."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .beamstats import STAT_ROWS, SummaryReport
from .trainer import ConfusionMatrix, EpochRecord

_SAVEFIG = {"dpi": 110, "metadata": {"Software": "beamsight"}}


def write_history_tsv(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["epoch", "train_acc", "val_acc", "loss"])
        for r in history:
            writer.writerow([r.epoch, f"{r.train_accuracy:.6f}",
                             f"{r.val_accuracy:.6f}", f"{r.train_loss:.6f}"])


def read_history_tsv(path) -> list[EpochRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            records.append(EpochRecord(epoch=int(row["epoch"]),
                                       train_accuracy=float(row["train_acc"]),
                                       val_accuracy=float(row["val_acc"]),
                                       train_loss=float(row["loss"])))
    return records


def plot_histories(histories: dict[str, list[EpochRecord]], path, title: str = "Accuracy by epoch") -> None:
    """Train/validation accuracy curves, one panel per run."""
    fig, axes = plt.subplots(1, len(histories), figsize=(5.2 * len(histories), 3.6),
                             squeeze=False, sharey=True)
    for ax, (name, history) in zip(axes[0], sorted(histories.items())):
        epochs = [r.epoch for r in history]
        ax.plot(epochs, [r.train_accuracy for r in history], marker="o", ms=3, label="train")
        ax.plot(epochs, [r.val_accuracy for r in history], marker="s", ms=3, label="validation")
        ax.set_title(name)
        ax.set_xlabel("epoch")
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("accuracy")
    axes[0][0].legend(loc="lower right", fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def confusion_text(cm: ConfusionMatrix) -> str:
    width = max(len(c) for c in cm.classes) + 2
    lines = ["confusion matrix (rows: actual, columns: predicted)", ""]
    header = " " * width + "".join(f"{c:>{width}}" for c in cm.classes)
    lines.append(header)
    for i, c in enumerate(cm.classes):
        lines.append(f"{c:>{width}}" + "".join(f"{int(v):>{width}}" for v in cm.counts[i]))
    lines.append("")
    lines.append(f"accuracy {cm.accuracy():.4f}")
    for c in cm.classes:
        lines.append(f"recall[{c}] {cm.recall(c):.4f}")
    return "\n".join(lines) + "\n"


def write_confusion(cm: ConfusionMatrix, path) -> None:
    Path(path).write_text(confusion_text(cm), encoding="utf-8")


# --- beam-map statistics reports ---------------------------------------------


def stats_report_rows(report: SummaryReport) -> list[dict]:
    rows = []
    for name, comp in report.features.items():
        rows.append({
            "feature": name,
            "fall_n": comp.fall.n,
            "fall_mean": comp.fall.mean,
            "fall_sd": comp.fall.sd,
            "control_n": comp.control.n,
            "control_mean": comp.control.mean,
            "control_sd": comp.control.sd,
            "t": comp.test.t,
            "df": comp.test.df,
            "p_value": comp.test.p_two_sided,
        })
    return rows


def write_stats_tsv(report: SummaryReport, path) -> None:
    rows = stats_report_rows(report)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()),
                                delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v)
                             for k, v in row.items()})


def stats_text(report: SummaryReport) -> str:
    """Aligned table: one stats column pair (fall, control) per feature."""
    features = list(report.features)
    col = 12
    lines = [f"circle radius {report.radius:g} m, {report.test_kind} test", ""]
    header1 = " " * 8 + "".join(f"{f:^{2 * col}}" for f in features)
    header2 = " " * 8 + "".join(f"{'fall':>{col}}{'control':>{col}}" for _ in features)
    lines.extend([header1, header2])
    for stat in STAT_ROWS:
        cells = []
        for f in features:
            comp = report.features[f]
            if stat == "Mean":
                cells.append(f"{comp.fall.mean:>{col}.2f}{comp.control.mean:>{col}.2f}")
            elif stat == "SD":
                cells.append(f"{comp.fall.sd:>{col}.2f}{comp.control.sd:>{col}.2f}")
            elif stat == "df":
                cells.append(f"{comp.test.df:>{2 * col}.1f}")
            elif stat == "t":
                cells.append(f"{comp.test.t:>{2 * col}.2f}")
            else:
                p = comp.test.p_two_sided
                text = "<.001" if p < 0.001 else f"{p:.3f}"
                cells.append(f"{text:>{2 * col}}")
        lines.append(f"{stat:<8}" + "".join(cells))
    return "\n".join(lines) + "\n"


def write_stats_text(report: SummaryReport, path) -> None:
    Path(path).write_text(stats_text(report), encoding="utf-8")


def plot_group_comparison(report: SummaryReport, path) -> None:
    """Mean +/- SD bars for fall and control groups, one panel per feature."""
    features = list(report.features)
    fig, axes = plt.subplots(1, len(features), figsize=(4.2 * len(features), 3.4), squeeze=False)
    for ax, name in zip(axes[0], features):
        comp = report.features[name]
        means = [comp.fall.mean, comp.control.mean]
        sds = [comp.fall.sd, comp.control.sd]
        ax.bar(["fall", "control"], means, yerr=sds, capsize=4,
               color=["#b3443a", "#4a6fa5"], alpha=0.85)
        p = comp.test.p_two_sided
        ax.set_title(f"{name} (t={comp.test.t:.2f}, p={'<.001' if p < 0.001 else f'{p:.3f}'})")
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
