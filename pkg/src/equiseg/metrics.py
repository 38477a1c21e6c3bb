"""Confusion-matrix metrics and AUC, evaluated strictly inside FOV masks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(
            self.tp + other.tp, self.fp + other.fp,
            self.tn + other.tn, self.fn + other.fn,
        )


def confusion(prob: np.ndarray, label: np.ndarray, fov: np.ndarray,
              threshold: float = 0.5) -> Confusion:
    """Counts over FOV-interior pixels only; prediction is prob >= threshold."""
    prob, label, fov = (np.asarray(a) for a in (prob, label, fov))
    if not (prob.shape == label.shape == fov.shape):
        raise InvalidArgument(
            f"shape mismatch: prob {prob.shape}, label {label.shape}, fov {fov.shape}"
        )
    if not 0.0 < threshold < 1.0:
        raise InvalidArgument(f"threshold must be in (0,1), got {threshold}")
    inside = fov > 0.5
    if not inside.any():
        raise InvalidArgument("empty FOV mask")
    pred = prob[inside] >= threshold
    truth = label[inside] > 0.5
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return Confusion(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} denominator is zero; reporting 0")
        return 0.0
    return num / den


def se(c: Confusion) -> float:
    return _ratio(c.tp, c.tp + c.fn, "sensitivity")


def sp(c: Confusion) -> float:
    return _ratio(c.tn, c.tn + c.fp, "specificity")


def acc(c: Confusion) -> float:
    return _ratio(c.tp + c.tn, c.total, "accuracy")


def f1(c: Confusion) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1")


def auc(prob: np.ndarray, label: np.ndarray, fov: np.ndarray) -> float:
    """Area under the ROC curve by the rank statistic with average ranks for
    ties; equals the trapezoidal ROC over all unique thresholds.  Returns nan
    (undefined) when only one class is present."""
    prob, label, fov = (np.asarray(a) for a in (prob, label, fov))
    if not (prob.shape == label.shape == fov.shape):
        raise InvalidArgument("shape mismatch in auc inputs")
    inside = fov > 0.5
    if not inside.any():
        raise InvalidArgument("empty FOV mask")
    scores = prob[inside].reshape(-1)
    truth = label[inside].reshape(-1) > 0.5
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined for single-class labels; reporting nan")
        return float("nan")
    ranks = _average_ranks(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def summarize(c: Confusion) -> dict:
    return {"Se": se(c), "Sp": sp(c), "F1": f1(c), "Acc": acc(c)}


def report_rows(per_image: list[dict], dataset: str, model: str) -> list[dict]:
    """Micro-averaged (pooled confusion) and macro-averaged metric rows."""
    pooled = Confusion()
    for r in per_image:
        pooled = pooled + r["confusion"]
    micro = summarize(pooled)
    micro["AUC"] = float(np.nanmean([r["auc"] for r in per_image]))
    rows = [{"dataset": dataset, "model": model, "average": "micro", **micro}]
    macro = {
        k: float(np.mean([summarize(r["confusion"])[k] for r in per_image]))
        for k in ("Se", "Sp", "F1", "Acc")
    }
    macro["AUC"] = micro["AUC"]
    rows.append({"dataset": dataset, "model": model, "average": "macro", **macro})
    return rows


def write_metrics_csv(path, rows: list[dict]) -> None:
    cols = ["dataset", "model", "average", "Se", "Sp", "F1", "Acc", "AUC"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            vals = [str(r["dataset"]), str(r["model"]), str(r["average"])]
            vals += [f"{r[k]:.4f}" for k in cols[3:]]
            fh.write(",".join(vals) + "\n")
