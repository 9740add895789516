"""Forward noising and the simplified noise-prediction objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .schedule import NoiseSchedule

NoisePredictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def to_model_range(pixels_uint8) -> torch.Tensor:
    """Map 8-bit storage values to [-1, 1] via ``x -> 2x/255 - 1``."""
    x = torch.as_tensor(pixels_uint8)
    return x.to(torch.float32) * (2.0 / 255.0) - 1.0


@dataclass(frozen=True)
class NoiseDraw:
    epsilon: torch.Tensor
    rng_seed: int


def draw_noise(shape, seed: int, dtype=torch.float32) -> NoiseDraw:
    gen = torch.Generator().manual_seed(int(seed))
    return NoiseDraw(torch.randn(tuple(shape), generator=gen, dtype=dtype), int(seed))


def _alpha_batch(schedule: NoiseSchedule, t, batch: int, dtype) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise ValueError(f"t must be scalar or shape ({batch},), got {tuple(t.shape)}")
    if ((t < 1) | (t > schedule.T)).any():
        raise ValueError(f"timesteps must lie in [1, {schedule.T}]")
    alphas = torch.tensor(schedule.alphas_cum)[t]
    return alphas.to(dtype)


def forward_noise(x0: torch.Tensor, t, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """Sample ``x_t = sqrt(a_t) x0 + sqrt(1 - a_t) eps`` with a per-item ``t``."""
    if isinstance(eps, NoiseDraw):
        eps = eps.epsilon
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match images {tuple(x0.shape)}")
    a = _alpha_batch(schedule, t, x0.shape[0], torch.float64)
    view = (-1,) + (1,) * (x0.ndim - 1)
    signal = a.sqrt().to(x0.dtype).view(view)
    noise = (1.0 - a).sqrt().to(x0.dtype).view(view)
    return signal * x0 + noise * eps.to(x0.dtype)


@dataclass
class LossOutput:
    loss: torch.Tensor
    per_item: torch.Tensor
    t: torch.Tensor
    epsilon: torch.Tensor


def training_loss(
    model: NoisePredictor,
    x0: torch.Tensor,
    y: torch.Tensor,
    schedule: NoiseSchedule,
    rng_seed: int,
) -> LossOutput:
    """Mean over batch and pixels of ``(eps - eps_theta(x_t, t, y))**2``.

    ``t`` is uniform on ``{1..T}`` per item and ``eps`` standard normal, both
    drawn from one generator seeded with ``rng_seed``.
    """
    y = torch.as_tensor(y, dtype=torch.long)
    if y.shape != (x0.shape[0],):
        raise ValueError("need one label per image")
    gen = torch.Generator().manual_seed(int(rng_seed))
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32).to(x0.dtype)
    x_t = forward_noise(x0, t, eps, schedule)
    pred = model(x_t, t, y)
    if pred.shape != eps.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != {tuple(eps.shape)}")
    sq = (eps - pred.to(eps.dtype)).pow(2)
    per_item = sq.flatten(1).mean(dim=1)
    return LossOutput(per_item.mean(), per_item.detach(), t, eps)
