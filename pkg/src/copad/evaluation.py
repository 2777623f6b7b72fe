"""Threshold selection, classification metrics, detection delay, and reports.

Scores are log-densities, so *low* means anomalous: a window is predicted
anomalous iff its score falls below the threshold. AUC uses the Mann-Whitney
rank statistic with half-credit for ties.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats as _stats

from . import dependency as dep


class ThresholdUndefinedError(ValueError):
    """Threshold selection needs at least one score from each class."""


@dataclass
class ScoredWindows:
    scores: np.ndarray
    end_indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.end_indices = np.asarray(self.end_indices, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (self.scores.shape == self.end_indices.shape == self.labels.shape):
            raise ValueError("scores, end indices, and labels must align")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any(np.diff(self.end_indices) <= 0):
            raise ValueError("window end indices must be strictly increasing")


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    auc_roc: float
    threshold: float
    add: float | None = None
    missed_events: int = 0
    confusion: dict = field(default_factory=dict)
    zero_division: list = field(default_factory=list)


def _confusion(scores, labels, threshold):
    pred = scores < threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    return tp, fp, fn, tn


def _f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def select_threshold(scores, labels):
    """F1-maximizing threshold; predictions are score < threshold.

    Candidates are midpoints between consecutive sorted unique scores plus
    -inf/+inf sentinels; ties break toward the smallest threshold, i.e. the
    fewest alarms.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ThresholdUndefinedError(
            "both classes must be present to select a threshold")
    uniq = np.unique(scores)
    candidates = np.concatenate([[-np.inf], 0.5 * (uniq[:-1] + uniq[1:]), [np.inf]])
    best_tau, best_f1 = -np.inf, -1.0
    for tau in candidates:
        tp, fp, fn, _ = _confusion(scores, labels, tau)
        f1 = _f1_from_counts(tp, fp, fn)
        if f1 > best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau, best_f1


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC with anomalies positive and -score as the rank statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ThresholdUndefinedError("AUC needs both classes")
    ranks = _stats.rankdata(-scores)  # average ranks give half-credit ties
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(scores, labels, threshold) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    tp, fp, fn, tn = _confusion(scores, labels, threshold)
    flags = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, flags = 0.0, flags + ["precision"]
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, flags = 0.0, flags + ["recall"]
    f1 = _f1_from_counts(tp, fp, fn)
    return MetricsReport(
        precision=float(precision), recall=float(recall), f1=float(f1),
        auc_roc=auc_roc(scores, labels), threshold=float(threshold),
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        zero_division=flags,
    )


@dataclass
class DelayResult:
    add: float | None
    delays: list
    detected: int
    missed: int


def _event_runs(y: np.ndarray):
    y = np.asarray(y, dtype=np.int64)
    padded = np.concatenate([[0], y, [0]])
    diff = np.diff(padded)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1)
    return list(zip(starts, ends))  # half-open


def average_detection_delay(predictions, labels, window_length: int) -> DelayResult:
    """Mean delay between event onset and the first flagged window covering it.

    Stride-1 windows: window i ends at sample i + window_length - 1. An event
    starting at t_s is detected at the smallest flagged window end >= t_s;
    events with no such window count as missed and are excluded from the mean.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    events = _event_runs(labels)
    if not events:
        return DelayResult(add=None, delays=[], detected=0, missed=0)
    flagged_ends = np.flatnonzero(predictions == 1) + window_length - 1
    delays, missed = [], 0
    for t_s, _ in events:
        qualifying = flagged_ends[flagged_ends >= t_s]
        if qualifying.size:
            delays.append(int(qualifying.min() - t_s))
        else:
            missed += 1
    add = float(np.mean(delays)) if delays else None
    return DelayResult(add=add, delays=delays, detected=len(delays), missed=missed)


def estimate_mi(model: dep.DependencyModel, n_samples: int, seed: int):
    """Monte-Carlo copula entropy: mean log-copula-density over samples.

    Returns (estimate, standard error). Zero exactly when the correlation is
    the identity; always non-negative up to sampling noise.
    """
    if model.family != "copula":
        raise ValueError("mutual information is defined for the copula family only")
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    rng = np.random.default_rng(seed)
    u = dep.sample_copula(model, n_samples, rng)
    if model.base == "gaussian":
        logc = dep.gaussian_copula_logdensity(u, model).data
    else:
        logc = dep.student_t_copula_logdensity(u, model).data
    logc = np.atleast_1d(logc)
    return float(logc.mean()), float(logc.std(ddof=1) / np.sqrt(n_samples))


def _svg_polyline_plot(series: dict, path, title: str, width=640, height=400):
    """Minimal SVG line chart: one polyline per named series."""
    pad = 50.0
    all_y = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    lo, hi = float(all_y.min()), float(all_y.max())
    if hi == lo:
        hi = lo + 1.0
    n = max(len(v) for v in series.values())
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def sx(i):
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def sy(v):
        return height - pad - (height - 2 * pad) * ((v - lo) / (hi - lo))

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" '
             f'y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    for idx, (name, values) in enumerate(series.items()):
        pts = " ".join(f"{sx(i):.2f},{sy(float(v)):.2f}" for i, v in enumerate(values))
        color = colors[idx % len(colors)]
        lines.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        lines.append(f'<text x="{width - pad + 5}" y="{pad + 15 * idx}" '
                     f'fill="{color}">{name}</text>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def emit_report(report: MetricsReport, history, out_dir) -> dict:
    """Write report.json plus SVG curves; returns the paths written.

    history is a list of per-epoch dicts with normal_mean / anomaly_mean
    (likelihood separation) and optional f1 / auc_roc entries. With an empty
    history only the report file is emitted.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    doc = {
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "auc_roc": report.auc_roc,
        "threshold": report.threshold,
        "add": report.add,
        "curves": list(history),
    }
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as fh:
        json.dump(doc, fh, indent=2)
    paths["report"] = report_path

    if history:
        sep = {
            "normal": [h["normal_mean"] for h in history],
            "anomaly": [h["anomaly_mean"] for h in history],
        }
        sep_path = os.path.join(out_dir, "separation.svg")
        _svg_polyline_plot(sep, sep_path, "mean log-density per class")
        paths["separation"] = sep_path

        metric_series = {}
        for key in ("f1", "auc_roc"):
            if all(key in h for h in history):
                metric_series[key] = [h[key] for h in history]
        if metric_series:
            met_path = os.path.join(out_dir, "metrics.svg")
            _svg_polyline_plot(metric_series, met_path, "validation metrics per epoch")
            paths["metrics"] = met_path
    return paths


def write_scores_csv(scored: ScoredWindows, predictions, path) -> None:
    """Score dump: window_index,t_end,score,label,prediction."""
    predictions = np.asarray(predictions, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write("window_index,t_end,score,label,prediction\n")
        for i in range(scored.scores.shape[0]):
            fh.write(f"{i},{scored.end_indices[i]},{float(scored.scores[i])!r},"
                     f"{scored.labels[i]},{predictions[i]}\n")
