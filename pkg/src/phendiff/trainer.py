"""Training loop for the conditional denoiser.

Adam on the noise-prediction loss, global-norm gradient clipping, an EMA copy
of the weights, periodic ``-live`` / ``-ema`` checkpoints and an append-only
``loss.csv`` (step, wall time, loss).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import yaml

from .checkpoint import Checkpoint, checkpoint_from_model, load_checkpoint, save_checkpoint
from .data.io import LabeledImages, load_dataset
from .denoiser import ConditionalDenoiser, DenoiserConfig, init_denoiser
from .diffusion import training_loss
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, NoiseSchedule, build_schedule

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-4
    ema_decay: float = 0.999
    seed: int = 0
    checkpoint_every: int = 0
    """Steps between periodic checkpoints; 0 writes only the final pair."""
    max_steps: int | None = None
    grad_clip: float = 1.0
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    base_width: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 2
    embed_dim: int = 128
    attention_levels: tuple[int, ...] | None = None
    dataset: str | None = None
    holdout_per_condition: int = 0
    """Images per condition (last in file order) excluded from training."""
    augment: bool = False
    output_dir: str = "runs/train"
    init_from: str | None = None
    log_every: int = 50

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def denoiser_config(self, num_conditions: int, image_size: int, channels: int = 3) -> DenoiserConfig:
        return DenoiserConfig(
            num_conditions=num_conditions,
            image_size=image_size,
            channels=channels,
            base_width=self.base_width,
            channel_multipliers=tuple(self.channel_multipliers),
            blocks_per_level=self.blocks_per_level,
            embed_dim=self.embed_dim,
            attention_levels=self.attention_levels,
        )

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        if self.attention_levels is not None:
            d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        if "channel_multipliers" in d:
            d["channel_multipliers"] = tuple(d["channel_multipliers"])
        if d.get("attention_levels") is not None:
            d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


def write_config(config: Mapping, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(yaml.safe_dump(dict(config), sort_keys=True, default_flow_style=False))
    os.replace(tmp, path)


def read_config(path: str | os.PathLike) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a key-value mapping")
    return data


@torch.no_grad()
def ema_update(ema_params: Mapping[str, torch.Tensor], live_params: Mapping[str, torch.Tensor], decay: float):
    """In place: ``ema <- decay * ema + (1 - decay) * live``. Returns ``ema_params``."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    if set(ema_params) != set(live_params):
        raise ValueError("EMA and live parameter names differ")
    for name, ema in ema_params.items():
        live = live_params[name]
        if ema.shape != live.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(ema.shape)} vs {tuple(live.shape)}")
        if decay == 0.0:
            ema.copy_(live)
        else:
            ema.mul_(decay).add_(live.to(ema.dtype), alpha=1.0 - decay)
    return ema_params


def derive_seed(root: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(root), *map(int, keys)]).generate_state(1)[0])


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


@dataclass
class TrainResult:
    live: Checkpoint
    ema: Checkpoint
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    output_dir: Path | None = None


def _write_divergence(out: Path, step: int, value: float, history) -> None:
    recent = [v for _, v in history[-10:]]
    (out / "diverged.json").write_text(json.dumps({"step": step, "loss": repr(value), "recent_losses": recent}, indent=2) + "\n")


def _ckpt_paths(out: Path, tag: str) -> tuple[Path, Path]:
    return out / "checkpoints" / f"{tag}-live.ckpt", out / "checkpoints" / f"{tag}-ema.ckpt"


def train(config: TrainConfig, dataset: LabeledImages | None = None) -> TrainResult:
    """Fit the denoiser; fully determined by ``config`` (and the data) on one thread."""
    config.validate()
    if dataset is None:
        if config.dataset is None:
            raise ValueError("no dataset given")
        dataset = load_dataset(config.dataset)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    manifest = dataset.manifest
    if config.holdout_per_condition:
        dataset, _ = dataset.split(config.holdout_per_condition)

    conditions = manifest.condition_names if manifest else [str(i) for i in range(int(dataset.labels.max()) + 1)]
    num_conditions = len(conditions)
    if dataset.labels.min() < 0 or dataset.labels.max() >= num_conditions:
        raise ValueError(f"labels must lie in [0, {num_conditions - 1}]")
    image_size = dataset.pixels.shape[-1]
    schedule = config.schedule()

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(config.to_dict(), out / "train_config.yaml")

    if config.init_from:
        start = load_checkpoint(config.init_from)
        model = start.build_model()
        ema_path = Path(str(config.init_from).replace("-live.ckpt", "-ema.ckpt"))
        ema_state = load_checkpoint(ema_path).state if ema_path.is_file() and ema_path != Path(config.init_from) else start.state
        step = start.step
        schedule = start.schedule
        conditions = start.conditions
    else:
        model = init_denoiser(config.denoiser_config(num_conditions, image_size), config.seed)
        ema_state = None
        step = 0
    ema_model = ConditionalDenoiser(model.config)
    ema_model.load_state_dict(ema_state if ema_state is not None else model.state_dict())
    ema_model.eval()

    extra = {"seed": config.seed}
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    live_params = dict(model.named_parameters())
    ema_params = dict(ema_model.named_parameters())

    loss_path = out / "loss.csv"
    new_log = not loss_path.exists() or step == 0
    loss_file = open(loss_path, "w" if new_log else "a", newline="")
    writer = csv.writer(loss_file, lineterminator="\n")
    if new_log:
        writer.writerow(["step", "wall_time", "loss"])

    history: list[tuple[int, float]] = []
    t0 = time.time()

    def checkpoint(tag: str) -> tuple[Checkpoint, Checkpoint]:
        live_ck = checkpoint_from_model(model, schedule, conditions, step, "live", extra)
        ema_ck = checkpoint_from_model(ema_model, schedule, conditions, step, "ema", extra)
        live_path, ema_path = _ckpt_paths(out, tag)
        save_checkpoint(live_ck, live_path)
        save_checkpoint(ema_ck, ema_path)
        return live_ck, ema_ck

    try:
        done = False
        for epoch in range(config.epochs):
            model.train()
            for x, y in dataset.batches(config.batch_size, seed=derive_seed(config.seed, 1, epoch), augment=config.augment):
                if config.max_steps is not None and step >= config.max_steps:
                    done = True
                    break
                out_loss = training_loss(model, x, y, schedule, derive_seed(config.seed, 2, step))
                loss = out_loss.loss
                value = float(loss.detach())
                if not math.isfinite(value):
                    _write_divergence(out, step, value, history)
                    raise TrainingDivergedError(step, value)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if config.grad_clip and config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                ema_update(ema_params, {k: v.detach() for k, v in live_params.items()}, config.ema_decay)
                step += 1
                history.append((step, value))
                writer.writerow([step, f"{time.time() - t0:.3f}", repr(value)])
                if config.log_every and step % config.log_every == 0:
                    loss_file.flush()
                    recent = np.mean([v for _, v in history[-config.log_every:]])
                    log.info("step %d  loss %.4f  (%.1fs)", step, recent, time.time() - t0)
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    checkpoint(f"step-{step:07d}")
            if done:
                break
    finally:
        loss_file.close()
        model.eval()

    live_ck, ema_ck = checkpoint("final")
    return TrainResult(live_ck, ema_ck, history, out)
