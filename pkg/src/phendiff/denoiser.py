"""Class-conditional U-Net noise predictor ``eps(x_t, t, y)``.

The timestep enters through a sinusoidal embedding and a two-layer MLP; the
condition label adds a learned row of ``condition_table`` to that embedding,
and the sum modulates every residual block through a per-block bias.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class DenoiserConfig:
    num_conditions: int
    image_size: int = 32
    channels: int = 3
    base_width: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 2
    embed_dim: int = 128
    attention_levels: tuple[int, ...] | None = None
    """Level indices that get self-attention; ``None`` means the deepest level only."""

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.attention_levels is not None:
            object.__setattr__(self, "attention_levels", tuple(sorted(int(a) for a in self.attention_levels)))
        self.validate()

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def resolved_attention_levels(self) -> tuple[int, ...]:
        if self.attention_levels is None:
            return (self.num_levels - 1,)
        return self.attention_levels

    def validate(self) -> None:
        if self.num_conditions < 1:
            raise ValueError("num_conditions must be >= 1")
        for name in ("image_size", "channels", "base_width", "blocks_per_level", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be a non-empty sequence of positive integers")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even for the sinusoidal embedding")
        factor = 2 ** (self.num_levels - 1)
        if self.image_size % factor:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by {factor} "
                f"({self.num_levels} resolution levels)"
            )
        for level in self.attention_levels or ():
            if not 0 <= level < self.num_levels:
                raise ValueError(f"attention level {level} out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        if self.attention_levels is not None:
            d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_multipliers"] = tuple(d["channel_multipliers"])
        if d.get("attention_levels") is not None:
            d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, embed_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(embed_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class ConditionalDenoiser(nn.Module):
    """Predicts the noise in ``x_t`` given timestep ``t`` and condition ``y``."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        widths = [c.base_width * m for m in c.channel_multipliers]
        attn_levels = set(c.resolved_attention_levels)

        self.time_mlp = nn.Sequential(
            nn.Linear(c.embed_dim, c.embed_dim), nn.SiLU(), nn.Linear(c.embed_dim, c.embed_dim)
        )
        self.condition_table = nn.Embedding(c.num_conditions, c.embed_dim)
        self.conv_in = nn.Conv2d(c.channels, c.base_width, 3, padding=1)

        self.down = nn.ModuleList()
        skip_widths = [c.base_width]
        ch = c.base_width
        for level, width in enumerate(widths):
            stage = nn.ModuleDict()
            stage["blocks"] = nn.ModuleList()
            stage["attn"] = nn.ModuleList()
            for _ in range(c.blocks_per_level):
                stage["blocks"].append(ResBlock(ch, width, c.embed_dim))
                stage["attn"].append(SelfAttention(width) if level in attn_levels else nn.Identity())
                ch = width
                skip_widths.append(ch)
            if level < c.num_levels - 1:
                stage["downsample"] = nn.Conv2d(ch, ch, 3, stride=2, padding=1)
                skip_widths.append(ch)
            self.down.append(stage)

        self.mid_block1 = ResBlock(ch, ch, c.embed_dim)
        self.mid_attn = SelfAttention(ch)
        self.mid_block2 = ResBlock(ch, ch, c.embed_dim)

        self.up = nn.ModuleList()
        for level in reversed(range(c.num_levels)):
            width = widths[level]
            stage = nn.ModuleDict()
            stage["blocks"] = nn.ModuleList()
            stage["attn"] = nn.ModuleList()
            for _ in range(c.blocks_per_level + 1):
                stage["blocks"].append(ResBlock(ch + skip_widths.pop(), width, c.embed_dim))
                stage["attn"].append(SelfAttention(width) if level in attn_levels else nn.Identity())
                ch = width
            if level > 0:
                stage["upsample"] = nn.Conv2d(ch, ch, 3, padding=1)
            self.up.append(stage)

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, c.channels, 3, padding=1)

    def embed(self, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        dtype = self.conv_in.weight.dtype
        emb = self.time_mlp(timestep_embedding(t, self.config.embed_dim).to(dtype))
        return emb + self.condition_table(y)

    def forward(self, x: torch.Tensor, t, y) -> torch.Tensor:
        c = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != (c.channels, c.image_size, c.image_size):
            raise ValueError(
                f"expected input of shape (B, {c.channels}, {c.image_size}, {c.image_size}), "
                f"got {tuple(x.shape)}"
            )
        b = x.shape[0]
        t = _as_index_batch(t, b, "t")
        y = _as_index_batch(y, b, "y")
        if (t < 1).any():
            raise ValueError("timesteps must be >= 1")
        if ((y < 0) | (y >= c.num_conditions)).any():
            raise ValueError(f"condition labels must lie in [0, {c.num_conditions - 1}]")

        emb = self.embed(t, y)
        h = self.conv_in(x.to(self.conv_in.weight.dtype))
        skips = [h]
        for stage in self.down:
            for block, attn in zip(stage["blocks"], stage["attn"]):
                h = attn(block(h, emb))
                skips.append(h)
            if "downsample" in stage:
                h = stage["downsample"](h)
                skips.append(h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, emb)), emb)

        for stage in self.up:
            for block, attn in zip(stage["blocks"], stage["attn"]):
                h = attn(block(torch.cat([h, skips.pop()], dim=1), emb))
            if "upsample" in stage:
                h = stage["upsample"](F.interpolate(h, scale_factor=2, mode="nearest"))

        return self.conv_out(F.silu(self.norm_out(h)))


def _as_index_batch(v, batch: int, name: str) -> torch.Tensor:
    v = torch.as_tensor(v)
    if v.is_floating_point():
        raise TypeError(f"{name} must be integer-valued")
    v = v.to(torch.long)
    if v.ndim == 0:
        v = v.expand(batch)
    if v.shape != (batch,):
        raise ValueError(f"{name} must be a scalar or have shape ({batch},), got {tuple(v.shape)}")
    return v


@torch.no_grad()
def reset_parameters(model: ConditionalDenoiser, seed: int) -> None:
    """Seeded initialization.

    Conv and linear weights are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``,
    biases zero, norm scales one, the condition table standard normal, and the
    output convolution all zeros so a fresh model predicts zero noise.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            w = torch.rand(module.weight.shape, generator=gen, dtype=torch.float64)
            module.weight.copy_((2.0 * w - 1.0) * bound)
            if module.bias is not None:
                module.bias.zero_()
        elif isinstance(module, nn.GroupNorm):
            module.weight.fill_(1.0)
            module.bias.zero_()
        elif isinstance(module, nn.Embedding):
            module.weight.copy_(torch.randn(module.weight.shape, generator=gen, dtype=torch.float64))
    model.conv_out.weight.zero_()
    model.conv_out.bias.zero_()


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> ConditionalDenoiser:
    model = ConditionalDenoiser(config)
    reset_parameters(model, seed)
    return model.eval()


@torch.no_grad()
def predict_noise(model: ConditionalDenoiser, x_t: torch.Tensor, t, y) -> torch.Tensor:
    """Inference-mode prediction; output has the shape (and dtype) of ``x_t``."""
    return model(x_t, t, y).to(x_t.dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
