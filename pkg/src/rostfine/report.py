"""Render training-log and evaluation figures to files.

Consumes the delimited per-epoch log written by ``train`` (epoch, loss,
cosine-similarity columns) and optionally an evaluation report JSON, and
renders matplotlib figures alongside a flat metrics CSV.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

COSINE_LABELS = {"gs": "global/spatial", "gt": "global/temporal", "st": "spatial/temporal"}


def read_train_log(path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} holds no epochs")
    columns: dict[str, list[float]] = {k: [] for k in rows[0]}
    for row in rows:
        for key, value in row.items():
            columns[key].append(float(value) if value != "" else float("nan"))
    return columns


def plot_loss_curve(columns: dict[str, list[float]], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(columns["epoch"], columns["loss"], color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.set_title("Training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_cosine_curves(columns: dict[str, list[float]], path) -> bool:
    pairs = [k[4:] for k in columns if k.startswith("cos_")]
    if not pairs:
        return False
    fig, ax = plt.subplots(figsize=(6, 4))
    for pair in sorted(pairs):
        ax.plot(columns["epoch"], columns[f"cos_{pair}"],
                label=COSINE_LABELS.get(pair, pair))
    ax.set_xlabel("epoch")
    ax.set_ylabel("|cosine similarity|")
    ax.set_ylim(bottom=0.0)
    ax.set_title("Feature-embedding similarity per epoch")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_eval_summary(report: dict, path) -> None:
    ba = report["average"]["balanced_accuracy"]
    ranks = [str(n) for n in range(1, 6)]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    left.bar(ranks, [ba[r] for r in ranks], color="tab:blue")
    left.axhline(ba["mean"], color="tab:red", linestyle="--", label=f"mean {ba['mean']:.1f}%")
    left.set_xlabel("n-th most selected grade")
    left.set_ylabel("balanced accuracy (%)")
    left.set_title("Balanced accuracy by rank")
    left.legend()

    folds = report["folds"]
    xs = [str(f.get("fold", i)) for i, f in enumerate(folds)]
    right.bar(xs, [f["mse"] for f in folds], color="tab:green", label="MSE")
    if all("baseline_mse" in f for f in folds):
        right.plot(xs, [f["baseline_mse"] for f in folds], "k--", marker="o", label="baseline MSE")
    right.set_xlabel("fold")
    right.set_ylabel("MSE")
    right.set_title("Per-fold error")
    right.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "n", "mse", "js", "ba1", "ba2", "ba3", "ba4", "ba5", "ba_mean"])
        for i, fold in enumerate(report["folds"]):
            ba = fold["balanced_accuracy"]
            writer.writerow([
                fold.get("fold", i), fold.get("n", ""),
                fold["mse"], fold["js"],
                *(ba[str(n)] for n in range(1, 6)), ba["mean"],
            ])
        avg = report["average"]
        ba = avg["balanced_accuracy"]
        writer.writerow(["average", "", avg["mse"], avg["js"],
                         *(ba[str(n)] for n in range(1, 6)), ba["mean"]])


def render_report(log_path, out_dir, eval_report: dict | None = None) -> list[str]:
    """Write all figures (and metrics.csv when eval data is given)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    columns = read_train_log(log_path)
    plot_loss_curve(columns, out_dir / "loss_curve.png")
    written.append("loss_curve.png")
    if plot_cosine_curves(columns, out_dir / "cosine_similarity.png"):
        written.append("cosine_similarity.png")
    if eval_report is not None:
        plot_eval_summary(eval_report, out_dir / "eval_summary.png")
        write_metrics_csv(eval_report, out_dir / "metrics.csv")
        written.extend(["eval_summary.png", "metrics.csv"])
    return written
