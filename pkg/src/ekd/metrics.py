"""Verification metrics: FPR/TPR, FPR-anchored thresholds and ROC curves."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .numeric import sorted_quantile_thresholds


def fpr_grid(fpr_upper=1e-1, fpr_lower=1e-6, k=6):
    """``k`` FPR targets evenly spaced in log10, largest first."""
    if k < 1:
        raise ValueError("need at least one FPR target")
    if k == 1:
        return np.array([fpr_upper])
    return np.logspace(np.log10(fpr_upper), np.log10(fpr_lower), k)


def _check(values, what):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError(f"{what} similarities must be non-empty")
    return values


def fpr_at(neg_sims, t):
    neg = _check(neg_sims, "negative")
    return np.count_nonzero(neg > t) / neg.size


def tpr_at(pos_sims, t):
    pos = _check(pos_sims, "positive")
    return np.count_nonzero(pos > t) / pos.size


def batch_thresholds(neg_sims, grid):
    """Per-batch threshold estimate for every FPR in ``grid``."""
    return sorted_quantile_thresholds(_check(neg_sims, "negative"), grid)


@dataclass
class ThresholdState:
    """EMA-tracked thresholds for one model, all starting at zero."""
    k: int
    alpha: float = 0.99
    thresholds: np.ndarray = field(default=None)
    num_updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("EMA momentum alpha must be in [0, 1)")
        if self.thresholds is None:
            self.thresholds = np.zeros(self.k)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if self.thresholds.shape != (self.k,):
            raise ValueError("threshold vector length must equal k")

    @property
    def initialized(self):
        return self.num_updates > 0

    def copy(self):
        return ThresholdState(self.k, self.alpha, self.thresholds.copy(), self.num_updates)


def ema_update(state, batch_estimates):
    """``t <- alpha * t + (1 - alpha) * e``, in place; returns ``state``."""
    e = np.asarray(batch_estimates, dtype=np.float64)
    if e.shape != state.thresholds.shape:
        raise ValueError(f"expected {state.k} estimates, got {e.shape}")
    if np.isnan(e).any():
        raise ValueError("NaN threshold estimate")
    state.thresholds = state.alpha * state.thresholds + (1.0 - state.alpha) * e
    state.num_updates += 1
    return state


class ResolutionError(ValueError):
    pass


def check_resolution(target_fprs, num_neg):
    """Raise unless every target FPR is at least ``1 / num_neg``."""
    for f in np.asarray(target_fprs, dtype=np.float64).ravel():
        if f * num_neg < 1 - 1e-9:
            raise ResolutionError(
                f"target FPR {f:g} is below the resolution 1/{num_neg}; "
                f"it needs at least {int(np.ceil(1.0 / f - 1e-9))} negative pairs")


def evaluate_tpr_at_fpr(pos_sims, neg_sims, target_fprs):
    """TPR at each target FPR; returns a list of ``(fpr, threshold, tpr)``."""
    pos = _check(pos_sims, "positive")
    neg = _check(neg_sims, "negative")
    targets = np.asarray(target_fprs, dtype=np.float64).ravel()
    check_resolution(targets, neg.size)
    thr = sorted_quantile_thresholds(neg, targets)
    return [(float(f), float(t), tpr_at(pos, t)) for f, t in zip(targets, thr)]


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def _rate_above(sorted_vals, ts):
    return (sorted_vals.size - np.searchsorted(sorted_vals, ts, side="right")) / sorted_vals.size


def roc_points(pos_sims, neg_sims, num_points=200):
    """ROC sampled at evenly spaced thresholds over the merged score range."""
    pos = np.sort(_check(pos_sims, "positive"))
    neg = np.sort(_check(neg_sims, "negative"))
    lo = min(pos[0], neg[0])
    hi = max(pos[-1], neg[-1])
    ts = np.linspace(lo, hi, max(int(num_points), 2))
    # one point below everything so the curve reaches (1, 1)
    ts = np.concatenate([[lo - max(1e-6 * (hi - lo), 1e-9)], ts])
    return RocCurve(ts, _rate_above(neg, ts), _rate_above(pos, ts))


def write_roc_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in curve.points():
            w.writerow([f"{t:.9g}", f"{f:.9g}", f"{p:.9g}"])


def write_tpr_table_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "threshold", "tpr"])
        for f, t, p in rows:
            w.writerow([repr(f), repr(t), repr(p)])
