"""Noise schedules for forward/reverse diffusion.

Timesteps are 1-indexed: t runs from 1 to T, with alpha_bar(0) == 1 by
convention (the empty product).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")

_LINEAR_BETA_START = 1e-4
_LINEAR_BETA_END = 0.02
_COSINE_OFFSET = 0.008
_BETA_MAX = 0.999


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise coefficients: betas, alphas = 1 - betas, alpha_bars = cumprod."""

    kind: str
    T: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0); zero at t == 1."""
        self._check_t(t)
        if t == 1:
            return 0.0
        return (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t={t} outside [1, {self.T}]")


def build_schedule(kind: str, T: int) -> DiffusionSchedule:
    """Build a linear or cosine beta schedule with T steps."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if kind == "linear":
        betas = np.linspace(_LINEAR_BETA_START, _LINEAR_BETA_END, T, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + _COSINE_OFFSET) / (1.0 + _COSINE_OFFSET) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, _BETA_MAX)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not (np.all(betas > 0) and np.all(betas < 1)):
        raise ScheduleError("betas left (0, 1)")
    if np.any(np.diff(alpha_bars) >= 0) and T > 1:
        raise ScheduleError("alpha_bar is not strictly decreasing")
    return DiffusionSchedule(kind=kind, T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)
