"""Deterministic DDIM generation, inversion, and condition-to-condition translation.

Any callable ``model(x, t, y) -> noise`` works as the predictor, which lets
tests plug in analytic predictors. Trajectories stay in the dtype of the input
image; pass float64 images for tight round-trip checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .schedule import NoiseSchedule, gamma, gamma_bar

Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def _predict(model: Predictor, x: torch.Tensor, t: int, y) -> torch.Tensor:
    b = x.shape[0]
    t_batch = torch.full((b,), int(t), dtype=torch.long)
    y = torch.as_tensor(y, dtype=torch.long)
    if y.ndim == 0:
        y = y.expand(b)
    with torch.no_grad():
        eps = model(x, t_batch, y)
    if eps.shape != x.shape:
        raise ValueError(f"predictor returned shape {tuple(eps.shape)} for input {tuple(x.shape)}")
    return eps.to(x.dtype)


def ddim_step(model: Predictor, x_hi: torch.Tensor, t_hi: int, t_lo: int, y, schedule: NoiseSchedule) -> torch.Tensor:
    """One deterministic denoising jump ``t_hi -> t_lo``."""
    g = gamma(schedule, t_hi, t_lo)
    a_hi = schedule.alphas_cum[t_hi]
    a_lo = schedule.alphas_cum[t_lo]
    eps = _predict(model, x_hi, t_hi, y)
    return math.sqrt(a_lo / a_hi) * x_hi + (math.sqrt(a_lo) * g) * eps


def ddim_invert_step(model: Predictor, x_lo: torch.Tensor, t_lo: int, t_hi: int, y, schedule: NoiseSchedule) -> torch.Tensor:
    """One deterministic inversion jump ``t_lo -> t_hi``; noise is predicted at ``(x_lo, t_lo)``.

    At ``t_lo = 0`` the predictor is queried at timestep 1, the closest level
    it was trained on; the coefficients still use ``alphas_cum[0] = 1``.
    """
    g = gamma_bar(schedule, t_lo, t_hi)
    a_hi = schedule.alphas_cum[t_hi]
    a_lo = schedule.alphas_cum[t_lo]
    eps = _predict(model, x_lo, max(t_lo, 1), y)
    return math.sqrt(a_hi / a_lo) * x_lo + (math.sqrt(a_hi) * g) * eps


def _validate_subsequence(subsequence: Sequence[int], schedule: NoiseSchedule) -> list[int]:
    steps = [int(s) for s in subsequence]
    if not steps:
        raise ValueError("empty step subsequence")
    if steps[-1] != schedule.T:
        raise ValueError(f"step subsequence must end at T={schedule.T}")
    if steps[0] < 1 or any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("step subsequence must be strictly increasing within [1, T]")
    return steps


@dataclass
class SamplerRun:
    output: torch.Tensor
    subsequence: list[int]
    condition: object
    trajectory: list[torch.Tensor] | None = None
    """Images at ``[T, ..., t_min, 0]`` (sampling) or ``[0, t_min, ..., T]`` (inversion)."""


def ddim_sample(
    model: Predictor,
    x_T: torch.Tensor,
    y,
    subsequence: Sequence[int],
    schedule: NoiseSchedule,
    record: bool = False,
) -> SamplerRun:
    """Denoise ``x_T`` down the subsequence and a final jump to ``t = 0``."""
    steps = _validate_subsequence(subsequence, schedule)
    pairs = list(zip(reversed(steps), list(reversed(steps[:-1])) + [0]))
    x = x_T
    trajectory = [x] if record else None
    for t_hi, t_lo in pairs:
        x = ddim_step(model, x, t_hi, t_lo, y, schedule)
        if record:
            trajectory.append(x)
    return SamplerRun(x, steps, y, trajectory)


def ddim_invert(
    model: Predictor,
    x_0: torch.Tensor,
    y,
    subsequence: Sequence[int],
    schedule: NoiseSchedule,
    record: bool = False,
) -> SamplerRun:
    """Map clean images to their latents, conditioned on their own labels ``y``."""
    steps = _validate_subsequence(subsequence, schedule)
    pairs = list(zip([0] + steps[:-1], steps))
    x = x_0
    trajectory = [x] if record else None
    for t_lo, t_hi in pairs:
        x = ddim_invert_step(model, x, t_lo, t_hi, y, schedule)
        if record:
            trajectory.append(x)
    return SamplerRun(x, steps, y, trajectory)


@dataclass
class TranslationResult:
    source: torch.Tensor
    source_labels: torch.Tensor
    latent: torch.Tensor
    targets: list[tuple[int, torch.Tensor]] = field(default_factory=list)
    reconstruction: torch.Tensor | None = None
    subsequence: list[int] = field(default_factory=list)

    def for_target(self, label: int) -> torch.Tensor:
        for lab, img in self.targets:
            if lab == label:
                return img
        raise KeyError(label)


def translate(
    model: Predictor,
    x_0: torch.Tensor,
    y_source,
    y_targets: Sequence[int],
    subsequence: Sequence[int],
    schedule: NoiseSchedule,
) -> TranslationResult:
    """Invert once under the source label, then regenerate under each target label."""
    y_source = torch.as_tensor(y_source, dtype=torch.long)
    if y_source.ndim == 0:
        y_source = y_source.expand(x_0.shape[0]).clone()
    latent = ddim_invert(model, x_0, y_source, subsequence, schedule).output
    reconstruction = ddim_sample(model, latent, y_source, subsequence, schedule).output
    targets = []
    for label in y_targets:
        label = int(label)
        if bool((y_source == label).all()):
            # same conditioning, same latent: the regeneration is the reconstruction
            targets.append((label, reconstruction))
        else:
            targets.append((label, ddim_sample(model, latent, label, subsequence, schedule).output))
    return TranslationResult(x_0, y_source, latent, targets, reconstruction, list(subsequence))


@dataclass
class DoseGrid:
    treatments: list[str]
    labels: list[list[int]]
    images: list[list[torch.Tensor]]
    """``images[row][col]`` is a single ``(C, H, W)`` translation."""
    source: torch.Tensor


def dose_grid(
    model: Predictor,
    x_0: torch.Tensor,
    y_source: int,
    treatments: Sequence[tuple[str, Sequence[int]]],
    subsequence: Sequence[int],
    schedule: NoiseSchedule,
) -> DoseGrid:
    """Translate one image along each treatment's ordered concentration labels."""
    if x_0.ndim == 3:
        x_0 = x_0[None]
    if x_0.shape[0] != 1:
        raise ValueError("dose_grid translates a single source image")
    all_labels = [int(lab) for _, labels in treatments for lab in labels]
    result = translate(model, x_0, int(y_source), list(dict.fromkeys(all_labels)), subsequence, schedule)
    images = [[result.for_target(int(lab))[0] for lab in labels] for _, labels in treatments]
    return DoseGrid(
        [name for name, _ in treatments],
        [[int(lab) for lab in labels] for _, labels in treatments],
        images,
        x_0[0],
    )
