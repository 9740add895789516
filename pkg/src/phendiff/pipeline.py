"""Checkpoint-level workflows shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data.io import LabeledImages
from .evaluation.fid import RandomProjectionEmbedder
from .evaluation.report import EvalReport, build_report
from .evaluation.stats import reconstruction_loss
from .sampler import TranslationResult, ddim_invert, ddim_sample, translate
from .schedule import make_subsequence


def source_pool(dataset: LabeledImages, source: int, holdout: int = 0) -> np.ndarray:
    """Dataset indices of ``source`` images; the last ``holdout`` of them when ``holdout > 0``."""
    idx = np.flatnonzero(dataset.labels == source)
    if len(idx) == 0:
        raise ValueError(f"no images of condition {source}")
    if holdout:
        if holdout > len(idx):
            raise ValueError(f"condition {source} has only {len(idx)} images; cannot hold out {holdout}")
        idx = idx[-holdout:]
    return idx


def select_sources(dataset: LabeledImages, source: int, num_images: int, seed: int, holdout: int = 0) -> np.ndarray:
    """Seeded uniform sample (without replacement) of source-condition images, sorted."""
    pool = source_pool(dataset, source, holdout)
    if num_images > len(pool):
        raise ValueError(f"asked for {num_images} source images but only {len(pool)} are available")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=num_images, replace=False))


def translate_batched(model, images: torch.Tensor, source: int, targets: Sequence[int], subsequence, schedule,
                      batch_size: int = 128) -> TranslationResult:
    """``translate`` over fixed-size chunks, concatenated; identical to one big call."""
    parts = [translate(model, images[i : i + batch_size], source, targets, subsequence, schedule)
             for i in range(0, len(images), batch_size)]
    if len(parts) == 1:
        return parts[0]
    cat = lambda xs: torch.cat(list(xs))
    return TranslationResult(
        source=cat(p.source for p in parts),
        source_labels=cat(p.source_labels for p in parts),
        latent=cat(p.latent for p in parts),
        targets=[(lab, cat(p.targets[k][1] for p in parts)) for k, (lab, _) in enumerate(parts[0].targets)],
        reconstruction=cat(p.reconstruction for p in parts),
        subsequence=parts[0].subsequence,
    )


@dataclass(frozen=True)
class RoundTrip:
    steps: int
    mse: float
    per_image: list[float]


def round_trip(model, images: torch.Tensor, label: int, steps: int, schedule, batch_size: int = 128) -> RoundTrip:
    """Invert then regenerate under the same label with ``steps`` DDIM steps."""
    seq = make_subsequence(schedule.T, steps)
    per_image: list[float] = []
    for i in range(0, len(images), batch_size):
        x = images[i : i + batch_size]
        latent = ddim_invert(model, x, label, seq, schedule).output
        rec = ddim_sample(model, latent, label, seq, schedule).output
        per_image.extend(reconstruction_loss(a, b).mean for a, b in zip(x, rec))
    return RoundTrip(steps, float(np.mean(per_image)), per_image)


def evaluate_checkpoint(
    checkpoint: Checkpoint,
    dataset: LabeledImages,
    source: int,
    num_images: int,
    steps: int,
    seed: int = 0,
    holdout: int = 0,
    batch_size: int = 128,
    embedder_seed: int = 0,
) -> tuple[EvalReport, TranslationResult]:
    """Translate sampled source images to every condition and score them against the real sets."""
    manifest = dataset.manifest
    if manifest is None:
        raise ValueError("evaluation needs a dataset with a manifest (condition names and treatments)")
    if list(manifest.condition_names) != list(checkpoint.conditions):
        raise ValueError("checkpoint and dataset disagree on the condition list")
    model = checkpoint.build_model()
    schedule = checkpoint.schedule
    subsequence = make_subsequence(schedule.T, steps)
    picked = select_sources(dataset, source, num_images, seed, holdout)
    images = dataset.images(picked)
    targets = list(range(len(manifest.conditions)))
    result = translate_batched(model, images, source, targets, subsequence, schedule, batch_size)

    real_sets = {c: dataset.images(np.flatnonzero(dataset.labels == c)) for c in targets}
    # generated images are scored as they would be exported: clamped to [-1, 1]
    gen_sets = {label: imgs.clamp(-1.0, 1.0) for label, imgs in result.targets}
    embedder = RandomProjectionEmbedder(seed=embedder_seed).fit(torch.cat([real_sets[c] for c in targets]))
    report = build_report(
        manifest.condition_names,
        real_sets,
        gen_sets,
        manifest.treatment_series(include_control=True),
        manifest.tracked_features,
        source_images=images,
        reconstructions=result.reconstruction,
        control=manifest.control_index(),
        embedder=embedder,
        metadata={
            "checkpoint": {"step": checkpoint.step, "kind": checkpoint.kind, **checkpoint.extra},
            "source": manifest.condition_names[source],
            "source_indices": picked.tolist(),
            "subsequence": list(subsequence),
            "steps": steps,
            "seed": seed,
            "holdout": holdout,
        },
    )
    report.reconstruction["steps"] = steps
    return report, result
