"""Evaluation-oriented distillation losses over pair similarities.

Every loss here takes teacher and student similarities for the same pairs
plus the current threshold vectors of both models, and returns the loss
together with its gradient with respect to the student similarities. The
teacher side and the thresholds are constants.

Variants
--------
``rank``  smooth rank-vector matching: ``|sum_k G(s_T - t_k^T) - sum_k G(s_S - t_k^S)|``
          averaged over pairs, ``G`` a sigmoid with temperature ``tau``.
``hard``  threshold-relative distance ``sum_k |(s_T - t_k^T) - (s_S - t_k^S)|``
          averaged over critical pairs only.
``l2``    plain similarity matching ``|s_T - s_S|`` averaged over pairs.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .numeric import stable_sigmoid

log = logging.getLogger(__name__)

VARIANTS = ("rank", "hard", "l2")
MINING = ("hard", "random")
MINE_BY = ("student", "teacher", "max")


@dataclass
class LossConfig:
    tau: float = 0.01
    lambda_pos: float = 0.02
    lambda_neg: float = 0.01
    n_hard_neg: int = 2000
    variant: str = "rank"
    mining: str = "hard"
    mine_by: str = "student"
    warmup_steps: int = 100

    def validate(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lambda_pos < 0 or self.lambda_neg < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.n_hard_neg < 1:
            raise ValueError("n_hard_neg must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.mining not in MINING:
            raise ValueError(f"mining must be one of {MINING}")
        if self.mine_by not in MINE_BY:
            raise ValueError(f"mine_by must be one of {MINE_BY}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


@dataclass
class CriticalMask:
    flags: np.ndarray    # (n,) any threshold disagrees
    detail: np.ndarray   # (n, K) per-threshold disagreement

    @property
    def count(self):
        return int(np.count_nonzero(self.flags))


@dataclass
class LossBreakdown:
    l_pos: float = 0.0
    l_neg: float = 0.0
    l_ekd: float = 0.0
    l_arcface: float = 0.0
    total: float = 0.0
    n_critical_pos: int = 0
    n_critical_neg: int = 0
    n_total_pos: int = 0
    n_total_neg: int = 0

    @property
    def critical_ratio(self):
        n = self.n_total_pos + self.n_total_neg
        return (self.n_critical_pos + self.n_critical_neg) / n if n else 0.0


def _thr(state_or_vec):
    return np.asarray(getattr(state_or_vec, "thresholds", state_or_vec), dtype=np.float64)


def _aligned(sims_t, sims_s):
    sims_t = np.asarray(sims_t, dtype=np.float64).ravel()
    sims_s = np.asarray(sims_s, dtype=np.float64).ravel()
    if sims_t.shape != sims_s.shape:
        raise ValueError(f"teacher/student similarity length mismatch: {sims_t.size} vs {sims_s.size}")
    return sims_t, sims_s


def select_critical(sims_t, sims_s, thr_t, thr_s):
    """Pairs falling on different sides of some threshold in the two models."""
    sims_t, sims_s = _aligned(sims_t, sims_s)
    tt, ts = _thr(thr_t), _thr(thr_s)
    if tt.shape != ts.shape:
        raise ValueError("teacher and student need the same number of thresholds")
    detail = (sims_t[:, None] > tt[None, :]) != (sims_s[:, None] > ts[None, :])
    return CriticalMask(detail.any(axis=1), detail)


def hard_negative_mine(neg_sims, n):
    """Indices of the ``n`` largest values, ties to the lower index."""
    v = np.asarray(neg_sims, dtype=np.float64).ravel()
    if n < 1:
        raise ValueError("n must be >= 1")
    if n >= v.size:
        return np.arange(v.size)
    order = np.lexsort((np.arange(v.size), -v))
    return np.sort(order[:n])


def random_negative_select(num_neg, n, rng):
    if n >= num_neg:
        return np.arange(num_neg)
    return np.sort(rng.choice(num_neg, size=n, replace=False))


def rank_vector(s, thresholds, tau):
    """Smooth count of thresholds lying below each similarity in ``s``."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    s = np.asarray(s, dtype=np.float64)
    g = stable_sigmoid((s[..., None] - _thr(thresholds)) / tau)
    return g.sum(axis=-1)


def ekd_loss_rank(sims_t, sims_s, thr_t, thr_s, tau):
    sims_t, sims_s = _aligned(sims_t, sims_s)
    n = sims_t.size
    if n == 0:
        log.debug("rank loss called with no pairs")
        return 0.0, np.zeros(0)
    g_t = stable_sigmoid((sims_t[:, None] - _thr(thr_t)[None, :]) / tau)
    g_s = stable_sigmoid((sims_s[:, None] - _thr(thr_s)[None, :]) / tau)
    diff = g_t.sum(axis=1) - g_s.sum(axis=1)
    loss = float(np.abs(diff).sum() / n)
    dr_s = (g_s * (1.0 - g_s)).sum(axis=1) / tau
    grad = -np.sign(diff) * dr_s / n
    return loss, grad


def ekd_loss_hard(sims_t, sims_s, thr_t, thr_s, critical):
    """Threshold-relative L1 over critical pairs (``critical``: mask or bool array)."""
    sims_t, sims_s = _aligned(sims_t, sims_s)
    if isinstance(critical, CriticalMask):
        critical = critical.flags
    mask = np.asarray(critical, dtype=bool)
    if mask.shape != sims_t.shape:
        raise ValueError("critical mask length mismatch")
    grad = np.zeros(sims_t.size)
    n = int(np.count_nonzero(mask))
    if n == 0:
        return 0.0, grad
    resid = (sims_t[mask, None] - _thr(thr_t)[None, :]) - (sims_s[mask, None] - _thr(thr_s)[None, :])
    loss = float(np.abs(resid).sum() / n)
    grad[mask] = -np.sign(resid).sum(axis=1) / n
    return loss, grad


def ekd_loss_l2(sims_t, sims_s):
    sims_t, sims_s = _aligned(sims_t, sims_s)
    n = sims_t.size
    if n == 0:
        return 0.0, np.zeros(0)
    d = sims_t - sims_s
    return float(np.abs(d).sum() / n), -np.sign(d) / n


def combine_ekd(l_pos, grad_pos, l_neg, grad_neg, config):
    """Weight the positive and negative terms; returns ``(l_ekd, g_pos, g_neg)``."""
    l_ekd = config.lambda_pos * l_pos + config.lambda_neg * l_neg
    return (l_ekd, config.lambda_pos * np.asarray(grad_pos),
            config.lambda_neg * np.asarray(grad_neg))


def pair_loss(variant, sims_t, sims_s, thr_t, thr_s, tau, critical=None):
    """Dispatch one pair set to the configured loss variant."""
    if variant == "rank":
        return ekd_loss_rank(sims_t, sims_s, thr_t, thr_s, tau)
    if variant == "hard":
        if critical is None:
            critical = select_critical(sims_t, sims_s, thr_t, thr_s)
        return ekd_loss_hard(sims_t, sims_s, thr_t, thr_s, critical)
    if variant == "l2":
        return ekd_loss_l2(sims_t, sims_s)
    raise ValueError(f"unknown loss variant {variant!r}")
