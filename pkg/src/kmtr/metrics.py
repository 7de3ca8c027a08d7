"""Evaluation metrics: MAE, binary classification scores, Dice and PSNR."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

PSNR_CAP_DB = 100.0


@dataclass
class MetricReport:
    task: str
    split: str
    n_subjects: int
    R: int
    seed: int
    variant: str = "k-MTR"
    values: dict[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise ValueError("subject count must be > 0")

    def to_json(self, path: str | Path) -> None:
        payload = {
            "task": self.task,
            "split": self.split,
            "n_subjects": self.n_subjects,
            "R": self.R,
            "seed": self.seed,
            "variant": self.variant,
            "values": self.values,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value", "task", "split", "n_subjects", "R", "seed", "variant"])
            for name in sorted(self.values):
                value = self.values[name]
                writer.writerow([
                    name,
                    "undefined" if value is None else repr(float(value)),
                    self.task, self.split, self.n_subjects, self.R, self.seed, self.variant,
                ])

    @staticmethod
    def from_json(path: str | Path) -> "MetricReport":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return MetricReport(task=d["task"], split=d["split"], n_subjects=d["n_subjects"],
                            R=d["R"], seed=d["seed"], variant=d["variant"], values=d["values"])


def mean_abs_error(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError(f"shape mismatch or empty input: {pred.shape} vs {truth.shape}")
    return float(np.mean(np.abs(pred - truth)))


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-statistic AUC with averaged ties; None when only one class present."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Step-integrated area under the precision-recall curve."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        return None
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    precision = tp / np.arange(1, labels.size + 1)
    recall = tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * precision))


def binary_metrics(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> dict:
    """AUC-ROC, F1, recall, precision and AP; AUC/AP are None if single-class."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "auc_roc": auc_roc(scores, labels),
        "f1": float(f1),
        "recall": float(recall),
        "precision": float(precision),
        "ap": average_precision(scores, labels),
    }


def dice(pred_labels: np.ndarray, truth: np.ndarray, c: int) -> float:
    """2|P∩G| / (|P| + |G|) for class c; both-empty is defined as 1.0."""
    if pred_labels.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred_labels.shape} vs {truth.shape}")
    p = pred_labels == c
    g = truth == c
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.sum(p & g) / total)


def psnr(pred: np.ndarray, truth: np.ndarray) -> float:
    """10*log10(peak^2 / MSE) with peak = max(truth); capped at 100 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    mse = float(np.mean((pred - truth) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    peak = float(np.max(truth))
    return float(min(10.0 * np.log10(peak**2 / mse), PSNR_CAP_DB))
