"""Linear beta schedule and the DDIM step coefficients derived from it.

Timesteps are 1-based. ``alphas_cum[0]`` holds the empty product (1.0) so the
last denoising step ``t -> 0`` and the first inversion step ``0 -> t`` are well
defined without special cases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    """Shape ``(T + 1,)``; ``betas[0]`` is an unused 0.0 pad so ``betas[t]`` is beta_t."""
    alphas_cum: np.ndarray = field(repr=False)
    """Shape ``(T + 1,)``; ``alphas_cum[t] = prod_{i<=t} (1 - beta_i)``."""

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def check_timestep(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly spaced betas over ``t = 1..T`` and their running product."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta bounds must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    T = int(T)

    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_cum = np.ones(T + 1, dtype=np.float64)
    alphas_cum[1:] = np.cumprod(1.0 - betas[1:])

    betas.setflags(write=False)
    alphas_cum.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas_cum)


def _check_pair(schedule: NoiseSchedule, t_lo: int, t_hi: int) -> tuple[int, int]:
    t_lo = schedule.check_timestep(t_lo, allow_zero=True)
    t_hi = schedule.check_timestep(t_hi, allow_zero=True)
    if t_lo >= t_hi:
        raise ValueError(f"need t_lo < t_hi, got t_lo={t_lo}, t_hi={t_hi}")
    return t_lo, t_hi


def _noise_ratio(schedule: NoiseSchedule, t: int) -> float:
    # sqrt(1/alpha_t - 1), exactly 0 at t = 0
    return float(np.sqrt(1.0 / schedule.alphas_cum[t] - 1.0))


def gamma(schedule: NoiseSchedule, t_hi: int, t_lo: int) -> float:
    """Denoising coefficient for the jump ``t_hi -> t_lo`` (non-positive)."""
    t_lo, t_hi = _check_pair(schedule, t_lo, t_hi)
    return _noise_ratio(schedule, t_lo) - _noise_ratio(schedule, t_hi)


def gamma_bar(schedule: NoiseSchedule, t_lo: int, t_hi: int) -> float:
    """Inversion coefficient for the jump ``t_lo -> t_hi`` (non-negative)."""
    t_lo, t_hi = _check_pair(schedule, t_lo, t_hi)
    return _noise_ratio(schedule, t_hi) - _noise_ratio(schedule, t_lo)


def make_subsequence(T: int, S: int) -> list[int]:
    """``S`` increasing timesteps from ``{1..T}`` ending at ``T``.

    Points are ``round(T * k / S)`` for ``k = 1..S`` with halves rounded up,
    so gaps differ by at most one.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if int(S) != S or not 1 <= S <= T:
        raise ValueError(f"number of steps must lie in [1, {T}], got {S!r}")
    T, S = int(T), int(S)
    # integer arithmetic: floor((2*T*k + S) / (2*S)) == round-half-up(T*k/S)
    return [(2 * T * k + S) // (2 * S) for k in range(1, S + 1)]
