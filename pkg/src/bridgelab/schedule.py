"""Per-epoch sampling probability and similarity-threshold schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleParams:
    """``k`` sets how fast the curves move, ``w`` the warmup epochs, ``gamma`` the threshold floor."""

    k: float = 5.0
    w: int = 32
    gamma: float = 0.9

    def __post_init__(self):
        if not self.k >= 1:
            raise ScheduleError(f"k must be >= 1, got {self.k}")
        if self.w < 0:
            raise ScheduleError(f"w must be >= 0, got {self.w}")
        if not 0.0 <= self.gamma < 1.0:
            raise ScheduleError(f"gamma must lie in [0, 1), got {self.gamma}")


@dataclass(frozen=True)
class EpochSchedule:
    epoch: int
    alpha: float
    beta: float


def ss_decay_alpha(n: float, k: float) -> float:
    """Probability of keeping the gold token under inverse-sigmoid decay: k / (k + e^(n/k))."""
    if not k >= 1:
        raise ScheduleError(f"k must be >= 1, got {k}")
    if n < 0:
        raise ScheduleError(f"n must be >= 0, got {n}")
    x = n / k
    if x > 700:
        return 0.0
    return k / (k + math.exp(x))


def adap_alpha(n: float, params: ScheduleParams) -> float:
    """Probability of running the similarity switch: 1 - k / (k + e^((n - w)/k))."""
    k = params.k
    x = (n - params.w) / k
    if x < -700:
        return math.exp(x) / k
    # same value as 1 - k/(k + e^x) without the cancellation; each rounding step is
    # monotone, so the float result is too
    return 1.0 / (1.0 + k * math.exp(-x))


def adap_beta(alpha: float, gamma: float) -> float:
    """Similarity threshold: gamma + (1 - gamma) * alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ScheduleError(f"alpha must lie in [0, 1], got {alpha}")
    if not 0.0 <= gamma < 1.0:
        raise ScheduleError(f"gamma must lie in [0, 1), got {gamma}")
    return gamma + (1.0 - gamma) * alpha


def epoch_schedule(n: int, params: ScheduleParams) -> EpochSchedule:
    alpha = adap_alpha(n, params)
    return EpochSchedule(epoch=n, alpha=alpha, beta=adap_beta(alpha, params.gamma))
