"""Deterministic intensity and morphology features for 3-channel cell images."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
import torch
from scipy import ndimage

from ..data.synth import CHANNEL_ROLES

FOREGROUND_THRESHOLD = 0.0
MIN_COMPONENT_AREA = 4
FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)

FEATURE_NAMES = (
    "mean_red",
    "mean_green",
    "mean_blue",
    "std_red",
    "std_green",
    "std_blue",
    "nuclear_fraction",
    "tubulin_fraction",
    "actin_fraction",
    "nuclei_count",
    "nucleus_area",
    "nucleus_elongation",
    "nucleus_intensity",
)


def _as_array(image) -> np.ndarray:
    arr = torch.as_tensor(image).detach().cpu().to(torch.float64).numpy() if not isinstance(image, np.ndarray) else image.astype(np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {arr.shape}")
    return arr


def elongation(rows: np.ndarray, cols: np.ndarray) -> float:
    """Major/minor axis ratio of the second-moment ellipse of a pixel set.

    Each pixel is treated as a unit square, which adds 1/12 to both principal
    variances; a lone pixel or a straight line therefore stays finite.
    """
    coords = np.stack([rows, cols]).astype(np.float64)
    cov = np.cov(coords, bias=True) if coords.shape[1] > 1 else np.zeros((2, 2))
    evals = np.linalg.eigvalsh(cov) + 1.0 / 12.0
    return float(np.sqrt(evals[1] / evals[0]))


def components(mask: np.ndarray, min_area: int = MIN_COMPONENT_AREA) -> list[tuple[np.ndarray, np.ndarray]]:
    """4-connected components of ``mask`` with at least ``min_area`` pixels."""
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTIVITY)
    out = []
    for k in range(1, n + 1):
        rows, cols = np.nonzero(labels == k)
        if rows.size >= min_area:
            out.append((rows, cols))
    return out


def extract_features(image, nuclear_channel: int = CHANNEL_ROLES["nuclear"]) -> "OrderedDict[str, float]":
    """Per-channel intensity statistics plus nuclear morphology.

    Foreground is ``value > 0`` (the midpoint of [-1, 1]). Nuclei are
    4-connected foreground components of the nuclear channel with at least 4
    pixels. Morphology averages are 0 when no nucleus is found.
    """
    arr = _as_array(image)
    red, green, blue = (arr[CHANNEL_ROLES[r]] for r in ("actin", "tubulin", "nuclear"))
    f = OrderedDict()
    f["mean_red"] = float(red.mean())
    f["mean_green"] = float(green.mean())
    f["mean_blue"] = float(blue.mean())
    f["std_red"] = float(red.std())
    f["std_green"] = float(green.std())
    f["std_blue"] = float(blue.std())

    nuclear = arr[nuclear_channel]
    mask = nuclear > FOREGROUND_THRESHOLD
    f["nuclear_fraction"] = float(mask.mean())
    f["tubulin_fraction"] = float((green > FOREGROUND_THRESHOLD).mean())
    f["actin_fraction"] = float((red > FOREGROUND_THRESHOLD).mean())

    comps = components(mask)
    f["nuclei_count"] = float(len(comps))
    if comps:
        f["nucleus_area"] = float(np.mean([r.size for r, _ in comps]))
        f["nucleus_elongation"] = float(np.mean([elongation(r, c) for r, c in comps]))
        f["nucleus_intensity"] = float(np.mean([nuclear[r, c].mean() for r, c in comps]))
    else:
        f["nucleus_area"] = 0.0
        f["nucleus_elongation"] = 0.0
        f["nucleus_intensity"] = 0.0
    return f


def feature_matrix(images) -> np.ndarray:
    """``(N, len(FEATURE_NAMES))`` features for an image batch."""
    rows = [list(extract_features(img).values()) for img in images]
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))
