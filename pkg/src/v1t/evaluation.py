"""Prediction quality metrics and analysis reports.

The headline metric is single-trial correlation: for each neuron, the
Pearson correlation across individual (non-averaged) trials between its
recorded and predicted responses, then the mean over neurons.  A pooled
variant (one correlation over all trial/neuron pairs) is available
behind a flag for comparison.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data import MouseRecord
from .exceptions import DataError
from .model import V1TModel


@dataclass
class CorrelationResult:
    per_neuron: np.ndarray      # NaN for excluded neurons
    mean_correlation: float
    n_excluded: int


def single_trial_correlation(responses: np.ndarray, predictions: np.ndarray,
                             pooled: bool = False) -> CorrelationResult:
    """Correlation between recorded and predicted responses over trials.

    responses/predictions are [n_trials, n_neurons].  Zero-variance
    neurons (in either series) are excluded from the mean and counted.
    """
    r = np.asarray(responses, dtype=np.float64)
    o = np.asarray(predictions, dtype=np.float64)
    if r.shape != o.shape or r.ndim != 2:
        raise DataError(f"shape mismatch: {r.shape} vs {o.shape}")
    if r.shape[0] < 2:
        raise DataError("correlation needs at least 2 trials")
    if pooled:
        rc = r - r.mean()
        oc = o - o.mean()
        denom = np.sqrt((rc * rc).sum() * (oc * oc).sum())
        value = float((rc * oc).sum() / denom) if denom > 0 else np.nan
        return CorrelationResult(per_neuron=np.full(r.shape[1], value),
                                 mean_correlation=value, n_excluded=0)
    rc = r - r.mean(axis=0)
    oc = o - o.mean(axis=0)
    var_r = (rc * rc).sum(axis=0)
    var_o = (oc * oc).sum(axis=0)
    valid = (var_r > 0) & (var_o > 0)
    per_neuron = np.full(r.shape[1], np.nan)
    per_neuron[valid] = (rc * oc).sum(axis=0)[valid] / np.sqrt(var_r[valid] * var_o[valid])
    mean = float(per_neuron[valid].mean()) if valid.any() else np.nan
    return CorrelationResult(per_neuron=per_neuron, mean_correlation=mean,
                             n_excluded=int((~valid).sum()))


def predictions_for_split(model: V1TModel, rec: MouseRecord, split: str,
                          batch_size: int = 256):
    """(responses, predictions) arrays for one mouse and split, eval mode."""
    idx = rec.trial_indices(split)
    if idx.size == 0:
        raise DataError(f"{rec.mouse_id}: split {split!r} is empty")
    outs = []
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        outs.append(model.forward(rec.mouse_id, rec.images[chunk], rec.behaviors[chunk],
                                  rec.pupil_center[chunk], train=False).data)
    return rec.responses[idx].astype(np.float64), np.concatenate(outs).astype(np.float64)


@dataclass
class MouseMetrics:
    mouse_id: str
    correlation: float
    per_neuron: np.ndarray
    n_excluded: int
    pupil_split: dict | None = None


@dataclass
class MetricsReport:
    split: str
    mice: list = field(default_factory=list)  # MouseMetrics

    @property
    def aggregate_correlation(self) -> float:
        return float(np.mean([m.correlation for m in self.mice]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mouse_id", "neuron", "correlation"])
            for m in self.mice:
                for i, c in enumerate(m.per_neuron):
                    writer.writerow([m.mouse_id, i, "" if np.isnan(c) else f"{c:.6f}"])

    def summary_text(self) -> str:
        lines = [f"single-trial correlation ({self.split} set)",
                 f"{'mouse':<10}{'corr':>8}{'excluded':>10}"]
        for m in self.mice:
            lines.append(f"{m.mouse_id:<10}{m.correlation:>8.3f}{m.n_excluded:>10d}")
        lines.append(f"{'avg':<10}{self.aggregate_correlation:>8.3f}")
        if any(m.pupil_split for m in self.mice):
            lines.append("")
            lines.append(f"{'mouse':<10}{'small-third':>12}{'large-third':>12}{'delta%':>8}")
            for m in self.mice:
                if m.pupil_split:
                    ps = m.pupil_split
                    lines.append(f"{m.mouse_id:<10}{ps['corr_small']:>12.3f}"
                                 f"{ps['corr_large']:>12.3f}{ps['relative_improvement'] * 100:>7.1f}%")
        return "\n".join(lines) + "\n"


def pupil_split_analysis(responses: np.ndarray, predictions: np.ndarray,
                         pupil_dilation: np.ndarray) -> dict:
    """Compare prediction quality on the large- vs small-dilation thirds.

    Trials are sorted by pupil dilation and split into three near-equal
    parts (sizes differ by at most one); reports the correlation on the
    smallest and largest thirds and the relative improvement of large
    over small.
    """
    n = len(pupil_dilation)
    if n < 6:
        raise DataError(f"pupil split needs >= 6 trials, got {n}")
    order = np.argsort(pupil_dilation, kind="stable")
    thirds = np.array_split(order, 3)
    small, large = thirds[0], thirds[-1]
    corr_small = single_trial_correlation(responses[small], predictions[small]).mean_correlation
    corr_large = single_trial_correlation(responses[large], predictions[large]).mean_correlation
    rel = (corr_large - corr_small) / abs(corr_small) if corr_small != 0 else np.inf
    return {"corr_small": corr_small, "corr_large": corr_large,
            "relative_improvement": rel,
            "sizes": [len(t) for t in thirds]}


def evaluate(model: V1TModel, records: list[MouseRecord], split: str = "test",
             batch_size: int = 256, pooled: bool = False,
             with_pupil_split: bool = False) -> MetricsReport:
    """Deterministic eval-mode metrics for every mouse plus the aggregate."""
    report = MetricsReport(split=split)
    for rec in records:
        r, o = predictions_for_split(model, rec, split, batch_size)
        res = single_trial_correlation(r, o, pooled=pooled)
        ps = None
        if with_pupil_split:
            idx = rec.trial_indices(split)
            ps = pupil_split_analysis(r, o, rec.behaviors[idx, 0])
        report.mice.append(MouseMetrics(mouse_id=rec.mouse_id,
                                        correlation=res.mean_correlation,
                                        per_neuron=res.per_neuron,
                                        n_excluded=res.n_excluded,
                                        pupil_split=ps))
    return report


def evaluate_ensemble(members: list[V1TModel], records: list[MouseRecord],
                      split: str = "test", batch_size: int = 256) -> MetricsReport:
    """Metrics for the mean-of-members prediction."""
    report = MetricsReport(split=split)
    for rec in records:
        idx = rec.trial_indices(split)
        preds = []
        for model in members:
            _, o = predictions_for_split(model, rec, split, batch_size)
            preds.append(o)
        o = np.mean(preds, axis=0)
        res = single_trial_correlation(rec.responses[idx].astype(np.float64), o)
        report.mice.append(MouseMetrics(mouse_id=rec.mouse_id,
                                        correlation=res.mean_correlation,
                                        per_neuron=res.per_neuron,
                                        n_excluded=res.n_excluded))
    return report
