"""Adaptive mixture rates for the deep tier.

The policy update mixes the old policy with the greedy one at a rate
alpha. The adaptive kinds estimate the classical step-size formulas from
replay batches: a decayed mean of the batch advantage in the numerator and
a decayed peak statistic in the denominator, so the rate grows when the
greedy policy still has something to offer and shrinks as the advantage
dies down.

Kinds:
    constant    alpha0
    hyperbolic  alpha0 / (1 + completed updates)
    cpi         alpha0 * trend / q_peak
    spi         alpha0 * trend / (adv_peak - adv_floor)
    adx         alpha0 * trend / adv_peak
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("constant", "hyperbolic", "cpi", "spi", "adx")
_ADAPTIVE = ("cpi", "spi", "adx")
_ZERO_DEN = 1e-12


@dataclass
class BatchAdvantageStats:
    """Summary of one policy batch: advantage spread and q magnitude."""

    mean_advantage: float
    max_advantage: float
    min_advantage: float
    max_abs_q: float


def batch_stats(q_values: np.ndarray, pi_probs: np.ndarray) -> BatchAdvantageStats:
    """Per-sample advantage max_a q(s,a) - sum_a pi(a|s) q(s,a), summarized.

    The advantage is nonnegative in exact arithmetic (a max dominates any
    convex combination); single-precision summation can undershoot by an
    ulp, so values are clamped at zero.
    """
    q_values = np.asarray(q_values)
    pi_probs = np.asarray(pi_probs)
    if q_values.ndim != 2 or q_values.shape != pi_probs.shape or not q_values.size:
        raise ValueError("need matching nonempty (batch, actions) arrays")
    adv = q_values.max(axis=1) - np.einsum("ba,ba->b", pi_probs, q_values)
    adv = np.maximum(adv, 0.0)
    return BatchAdvantageStats(
        mean_advantage=float(adv.mean()),
        max_advantage=float(adv.max()),
        min_advantage=float(adv.min()),
        max_abs_q=float(np.abs(q_values).max()))


@dataclass
class RateState:
    """Mixture-rate schedule state.

    trend is a beta1-decayed average of batch mean advantages. q_peak,
    adv_peak decay toward zero at beta2 per update but snap up to any new
    batch peak; adv_floor starts at the +inf marker and drifts up at
    1/beta2 while snapping down to new batch minima. Peaks and floor are
    refreshed from the same batch, so adv_peak >= adv_floor after every
    update.
    """

    kind: str
    alpha0: float
    beta1: float = 0.99
    beta2: float = 0.9999
    trend: float = 0.0
    q_peak: float = 0.0
    adv_peak: float = 0.0
    adv_floor: float = math.inf
    updates: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rate kind {self.kind!r}")
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")
        if not (0 <= self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("decay factors must lie in (0, 1)")

    def update(self, stats: BatchAdvantageStats) -> None:
        self.trend = self.beta1 * self.trend + (1 - self.beta1) * stats.mean_advantage
        self.q_peak = max(self.beta2 * self.q_peak, stats.max_abs_q)
        self.adv_peak = max(self.beta2 * self.adv_peak, stats.max_advantage)
        self.adv_floor = min(self.adv_floor / self.beta2, stats.min_advantage)
        self.updates += 1

    def _ratio(self) -> tuple[float, float]:
        """(numerator, denominator) of the adaptive ratio."""
        num = self.alpha0 * self.trend
        if self.kind == "cpi":
            return num, self.q_peak
        if self.kind == "spi":
            return num, self.adv_peak - self.adv_floor
        return num, self.adv_peak

    def pre_clip_alpha(self) -> float:
        """The raw rate before clipping, with division-by-zero read as +inf.

        Useful for checking the ordering between kinds; current_alpha() is
        what training consumes.
        """
        if self.kind == "constant":
            return self.alpha0
        if self.kind == "hyperbolic":
            return self.alpha0 / (1 + self.updates)
        self._require_update()
        num, den = self._ratio()
        if den == 0.0:
            return math.inf if num > 0 else 0.0
        return num / den

    def current_alpha(self) -> float:
        """The mixture rate to use now, clipped to [0, 1]."""
        if self.kind in ("constant", "hyperbolic"):
            return float(min(1.0, max(0.0, self.pre_clip_alpha())))
        self._require_update()
        num, den = self._ratio()
        if den < _ZERO_DEN:
            logger.info("rate %s denominator %.3g below floor; forcing alpha 0",
                        self.kind, den)
            return 0.0
        return float(min(1.0, max(0.0, num / den)))

    def _require_update(self) -> None:
        if self.updates == 0:
            raise RuntimeError(
                f"adaptive rate {self.kind!r} queried before any batch update")
