"""Evaluation metrics: set-level MSE/JS, balanced accuracy, Kruskal-Wallis.

The classification view ranks the five grades of a distribution and asks
whether the n-th most-selected grade is predicted correctly; ties rank
the better grade first (A before B before C ...).  Balanced accuracy
averages per-class recall over the classes that actually occur in the
truth, so folds that miss a rare grade do not zero out the score.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import chi2

GRADES = 5
GRADE_NAMES = ("A", "B", "C", "D", "E")


def nth_grade(dist, n: int) -> int:
    """Index of the n-th largest probability; ties favor the better grade."""
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (GRADES,):
        raise ValueError(f"expected a length-{GRADES} distribution, got shape {dist.shape}")
    if not 1 <= n <= GRADES:
        raise ValueError(f"n must lie in [1, {GRADES}], got {n}")
    order = sorted(range(GRADES), key=lambda i: (-dist[i], i))
    return order[n - 1]


def balanced_accuracy(pred_grades, true_grades, classes: int = GRADES) -> float:
    """Mean per-class recall (percent) over classes present in the truth."""
    pred = np.asarray(pred_grades, dtype=int)
    true = np.asarray(true_grades, dtype=int)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and truths must be equal-length 1-d sequences")
    if pred.size == 0:
        raise ValueError("cannot score an empty sample set")
    recalls = []
    for c in range(classes):
        mask = true == c
        if mask.any():
            recalls.append(float((pred[mask] == c).mean()))
    return 100.0 * float(np.mean(recalls))


def mse_value(predicted, target) -> float:
    p = np.asarray(predicted, dtype=float)
    y = np.asarray(target, dtype=float)
    return float(np.mean((p - y) ** 2))


def js_value(predicted, target, eps: float = 1e-8) -> float:
    """Numpy-side Jensen-Shannon divergence with the same smoothing as training."""
    p = np.asarray(predicted, dtype=float)
    q = np.asarray(target, dtype=float)
    m = 0.5 * (p + q)

    def _kl(a, b):
        a = (a + eps) / (1.0 + a.size * eps)
        b = (b + eps) / (1.0 + b.size * eps)
        return float(np.sum(a * np.log(a / b)))

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def dataset_metrics(predictions, labels) -> dict:
    """Set-level MSE, JS, and balanced accuracy for ranks 1..5.

    Returns {"n": ..., "mse": ..., "js": ..., "balanced_accuracy":
    {"1": .., ..., "5": .., "mean": ..}}.
    """
    predictions = [np.asarray(p, dtype=float) for p in predictions]
    labels = [np.asarray(y, dtype=float) for y in labels]
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not predictions:
        raise ValueError("cannot score an empty sample set")
    mse_total = float(np.mean([mse_value(p, y) for p, y in zip(predictions, labels)]))
    js_total = float(np.mean([js_value(p, y) for p, y in zip(predictions, labels)]))
    ba = {}
    for n in range(1, GRADES + 1):
        pred_grades = [nth_grade(p, n) for p in predictions]
        true_grades = [nth_grade(y, n) for y in labels]
        ba[str(n)] = balanced_accuracy(pred_grades, true_grades)
    ba["mean"] = float(np.mean([ba[str(n)] for n in range(1, GRADES + 1)]))
    return {"n": len(predictions), "mse": mse_total, "js": js_total, "balanced_accuracy": ba}


def kruskal_wallis(groups) -> tuple[float, float]:
    """Rank-based H statistic with ties correction and chi-square p-value."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    if any(g.size == 0 for g in groups):
        raise ValueError("every group must be non-empty")
    pooled = np.concatenate(groups)
    n = pooled.size

    # average ranks, 1-based
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(n, dtype=float)
    sorted_vals = pooled[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1

    # ties correction
    _, counts = np.unique(sorted_vals, return_counts=True)
    correction = 1.0 - float(np.sum(counts ** 3 - counts)) / (n ** 3 - n)
    if correction == 0.0:
        return 0.0, 1.0

    offset = 0
    rank_sum_sq = 0.0
    for g in groups:
        r = ranks[offset:offset + g.size]
        rank_sum_sq += r.sum() ** 2 / g.size
        offset += g.size
    h = (12.0 / (n * (n + 1.0))) * rank_sum_sq - 3.0 * (n + 1.0)
    h /= correction
    df = len(groups) - 1
    return float(h), float(chi2.sf(h, df))


def build_report(fold_results: list[dict], samples: list[dict] | None = None) -> dict:
    """Assemble per-fold metrics into a report with exact averages."""
    keys = ("mse", "js")
    average: dict = {k: float(np.mean([f[k] for f in fold_results])) for k in keys}
    ba_keys = [str(i) for i in range(1, GRADES + 1)] + ["mean"]
    average["balanced_accuracy"] = {
        k: float(np.mean([f["balanced_accuracy"][k] for f in fold_results])) for k in ba_keys
    }
    if all("baseline_mse" in f for f in fold_results):
        average["baseline_mse"] = float(np.mean([f["baseline_mse"] for f in fold_results]))
    report = {"folds": fold_results, "average": average}
    if samples is not None:
        report["samples"] = samples
    return report
