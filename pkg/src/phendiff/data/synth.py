"""Synthetic multi-condition "cell" images with known dose responses.

Each cell is a nucleus (nuclear channel) inside a larger cytoplasm ellipse
that carries the two cytoskeleton stains. Treatments move the expected cell
count, cytoplasm extent, nucleus elongation and stain intensities along
per-rank curves, and every true parameter is written to a ground-truth table.
"""

from __future__ import annotations

import csv
import math
import os
import shutil
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .io import Condition, DatasetManifest, replace_dir, staging_dir, write_manifest, write_png

# channel order in the stored RGB images
CHANNEL_ROLES = {"actin": 0, "tubulin": 1, "nuclear": 2}
PIXEL_NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class CellParams:
    expected_count: float
    nucleus_radius: float = 1.8
    elongation: float = 1.0
    cyto_scale: float = 2.0
    red: float = 0.7
    green: float = 0.6
    blue: float = 0.9
    haze: float = 0.0
    """Fraction of the cytoskeleton stain amplitudes present between cells."""

    def validate(self, where: str = "") -> None:
        if self.expected_count < 0:
            raise ValueError(f"{where}: expected_count must be >= 0")
        for name in ("nucleus_radius", "elongation", "cyto_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{where}: {name} must be positive")
        if self.elongation < 1:
            raise ValueError(f"{where}: elongation is a major/minor ratio and must be >= 1")
        for name in ("red", "green", "blue", "haze"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{where}: {name} intensity must lie in [0, 1]")


@dataclass(frozen=True)
class Treatment:
    name: str
    ranks: tuple[CellParams, ...]
    """Parameters at concentration ranks 1, 2, ... in increasing dose."""
    tracked_features: tuple[str, ...] = ()


@dataclass(frozen=True)
class SynthConfig:
    control: CellParams
    treatments: tuple[Treatment, ...]
    image_size: int = 32
    images_per_condition: int = 500
    seed: int = 0
    noise_sigma: float = PIXEL_NOISE_SIGMA
    control_name: str = "untreated"
    radius_jitter: float = 0.1
    max_layout_attempts: int = 50
    max_cells: int = 13
    """Poisson draws above this are redrawn (a truncated Poisson)."""

    def conditions(self) -> list[tuple[Condition, CellParams]]:
        out = [(Condition(0, self.control_name, self.control_name, 0), self.control)]
        for tr in self.treatments:
            for rank, params in enumerate(tr.ranks, start=1):
                out.append((Condition(len(out), f"{tr.name}_c{rank}", tr.name, rank), params))
        return out

    def validate(self) -> None:
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.images_per_condition < 0:
            raise ValueError("images_per_condition must be >= 0")
        if self.max_cells < 0:
            raise ValueError("max_cells must be >= 0")
        for cond, params in self.conditions():
            params.validate(cond.name)


def _curve(control: CellParams, **per_rank) -> tuple[CellParams, ...]:
    n = len(next(iter(per_rank.values())))
    return tuple(replace(control, **{k: v[i] for k, v in per_rank.items()}) for i in range(n))


def default_config(images_per_condition: int = 500, seed: int = 0, image_size: int = 32) -> SynthConfig:
    """Untreated control plus three treatments at four concentration ranks (13 conditions)."""
    control = CellParams(expected_count=8.0, cyto_scale=3.0, red=0.8, green=0.5, haze=0.7)
    treatments = (
        # loses cells fastest, actin signal vanishes, cytoplasm contracts
        Treatment(
            "latrunculin_like",
            _curve(
                control,
                expected_count=[7.0, 5.5, 4.5, 3.0],
                red=[0.6, 0.4, 0.2, 0.0],
                cyto_scale=[2.8, 2.6, 2.4, 2.2],
            ),
            ("nuclei_count", "mean_red"),
        ),
        # cells spread out, tubulin brightens while actin fades
        Treatment(
            "nocodazole_like",
            _curve(
                control,
                expected_count=[7.5, 7.0, 6.5, 6.0],
                green=[0.625, 0.75, 0.875, 1.0],
                red=[0.7, 0.6, 0.5, 0.4],
                cyto_scale=[3.2, 3.4, 3.6, 3.8],
            ),
            ("mean_green", "mean_red"),
        ),
        # elongated nuclei, tubulin fades
        Treatment(
            "herbimycin_like",
            _curve(
                control,
                expected_count=[7.5, 6.5, 5.5, 4.5],
                elongation=[1.25, 1.5, 1.75, 2.0],
                green=[0.375, 0.25, 0.125, 0.0],
                red=[0.72, 0.64, 0.56, 0.48],
            ),
            ("nuclei_count", "mean_green"),
        ),
    )
    return SynthConfig(control, treatments, image_size=image_size, images_per_condition=images_per_condition, seed=seed)


class InfeasibleLayoutError(RuntimeError):
    pass


def ellipse_coverage(
    size: int, cx: float, cy: float, a: float, b: float, theta: float
) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of an ellipse over a ``size x size`` pixel grid.

    Uses the first-order signed distance ``(rho - 1) / |grad rho|`` with
    ``rho`` the normalized elliptic radius, mapped through a one-pixel ramp.
    Pixel ``(i, j)`` has its center at ``x = j, y = i``.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    grad = np.sqrt((u / a**2) ** 2 + (v / b**2) ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(rho > 1e-12, (rho - 1.0) * rho / grad, -min(a, b))
    return np.clip(0.5 - dist, 0.0, 1.0)


@dataclass
class Cell:
    cx: float
    cy: float
    a: float
    b: float
    theta: float


def _layout(params: CellParams, size: int, count: int, rng: np.random.Generator, jitter: float, attempts: int) -> list[Cell] | None:
    cells: list[Cell] = []
    for _ in range(count):
        r = params.nucleus_radius * (1.0 + jitter * (2.0 * rng.random() - 1.0))
        a = r * math.sqrt(params.elongation)
        b = r / math.sqrt(params.elongation)
        margin = a + 1.0
        placed = False
        for _ in range(attempts):
            cx, cy = rng.uniform(margin, size - 1 - margin, size=2)
            # keep nuclei separated by >= 1.5 px so they stay distinct 4-connected components
            if all(math.hypot(cx - o.cx, cy - o.cy) >= a + o.a + 1.5 for o in cells):
                placed = True
                break
        if not placed:
            return None
        cells.append(Cell(cx, cy, a, b, rng.uniform(0.0, math.pi)))
    return cells


def truncated_poisson(rng: np.random.Generator, lam: float, max_count: int) -> int:
    while True:
        k = int(rng.poisson(lam))
        if k <= max_count:
            return k


def truncated_poisson_mean(lam: float, max_count: int) -> float:
    k = np.arange(max_count + 1)
    pmf = stats.poisson.pmf(k, lam)
    return float((k * pmf).sum() / pmf.sum())


def render_image(params: CellParams, size: int, rng: np.random.Generator, noise_sigma: float = PIXEL_NOISE_SIGMA,
                 jitter: float = 0.1, max_layout_attempts: int = 50, max_cells: int = 13) -> tuple[np.ndarray, int]:
    """One ``(3, size, size)`` float image in [-1, 1] and its true cell count."""
    count = truncated_poisson(rng, params.expected_count, max_cells)
    for _ in range(max_layout_attempts):
        cells = _layout(params, size, count, rng, jitter, attempts=200)
        if cells is not None:
            break
    else:
        raise InfeasibleLayoutError(f"cannot place {count} non-overlapping cells on a {size}x{size} canvas")

    intensity = np.zeros((3, size, size))
    intensity[CHANNEL_ROLES["actin"]] = params.red * params.haze
    intensity[CHANNEL_ROLES["tubulin"]] = params.green * params.haze
    for cell in cells:
        nucleus = ellipse_coverage(size, cell.cx, cell.cy, cell.a, cell.b, cell.theta)
        cyto = ellipse_coverage(size, cell.cx, cell.cy, cell.a * params.cyto_scale, cell.b * params.cyto_scale, cell.theta)
        np.maximum(intensity[CHANNEL_ROLES["actin"]], params.red * cyto, out=intensity[CHANNEL_ROLES["actin"]])
        np.maximum(intensity[CHANNEL_ROLES["tubulin"]], params.green * cyto, out=intensity[CHANNEL_ROLES["tubulin"]])
        np.maximum(intensity[CHANNEL_ROLES["nuclear"]], params.blue * nucleus, out=intensity[CHANNEL_ROLES["nuclear"]])
    image = 2.0 * intensity - 1.0 + noise_sigma * rng.standard_normal(intensity.shape)
    return np.clip(image, -1.0, 1.0), count


def quantize(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` in [-1, 1] -> ``(H, W, 3)`` uint8."""
    return np.rint((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0).copy()


def image_rng(seed: int, condition: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(condition), int(index)])


def generate_condition(config: SynthConfig, condition: Condition, params: CellParams, n: int | None = None):
    """Yield ``(uint8 HWC image, true count)`` for the first ``n`` images of one condition."""
    n = config.images_per_condition if n is None else n
    for i in range(n):
        rng = image_rng(config.seed, condition.index, i)
        try:
            image, count = render_image(params, config.image_size, rng, config.noise_sigma,
                                        config.radius_jitter, config.max_layout_attempts, config.max_cells)
        except InfeasibleLayoutError as exc:
            raise InfeasibleLayoutError(f"condition {condition.name!r}, image {i}: {exc}") from None
        yield quantize(image), count


GROUND_TRUTH_NAME = "ground_truth.csv"


def ground_truth_rows(config: SynthConfig) -> list[tuple[str, str, float]]:
    rows = []
    for cond, params in config.conditions():
        for key, value in asdict(params).items():
            rows.append((cond.name, key, float(value)))
        rows.append((cond.name, "mean_count", truncated_poisson_mean(params.expected_count, config.max_cells)))
    return rows


def generate_benchmark(config: SynthConfig, out_dir: str | os.PathLike,
                       extra_files: dict[str, str] | None = None) -> DatasetManifest:
    """Render every condition into ``out_dir`` and write manifest and ground truth.

    The tree is assembled in a sibling temp directory and renamed into place,
    so a failure never leaves a partial dataset behind. ``extra_files`` maps
    relative paths to text written into the tree before the rename.
    """
    config.validate()
    out_dir = Path(out_dir)
    tmp = staging_dir(out_dir)
    try:
        files: dict[int, list[str]] = {}
        counts: list[tuple[str, int, int]] = []
        for cond, params in config.conditions():
            sub = Path("images") / f"{cond.index:02d}_{cond.name}"
            files[cond.index] = []
            for i, (pixels, count) in enumerate(generate_condition(config, cond, params)):
                rel = sub / f"{cond.index:02d}_{i:04d}.png"
                write_png(pixels, tmp / rel)
                files[cond.index].append(rel.as_posix())
                counts.append((cond.name, i, count))

        with open(tmp / GROUND_TRUTH_NAME, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["condition", "parameter", "value"])
            for name, key, value in ground_truth_rows(config):
                w.writerow([name, key, repr(value)])
        with open(tmp / "cell_counts.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["condition", "image", "true_count"])
            w.writerows(counts)

        manifest = DatasetManifest(
            root=out_dir,
            conditions=[c for c, _ in config.conditions()],
            channel_roles=dict(CHANNEL_ROLES),
            image_size=config.image_size,
            files=files,
            tracked_features={t.name: list(t.tracked_features) for t in config.treatments},
            seed=config.seed,
        )
        write_manifest(manifest, tmp)
        for rel, text in (extra_files or {}).items():
            (tmp / rel).write_text(text)
        replace_dir(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_ground_truth(root: str | os.PathLike) -> dict[str, dict[str, float]]:
    table: dict[str, dict[str, float]] = {}
    with open(Path(root) / GROUND_TRUTH_NAME, newline="") as f:
        for row in csv.DictReader(f):
            table.setdefault(row["condition"], {})[row["parameter"]] = float(row["value"])
    return table


def config_to_dict(config: SynthConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> SynthConfig:
    d = dict(d)
    d["control"] = CellParams(**d["control"])
    d["treatments"] = tuple(
        Treatment(t["name"], tuple(CellParams(**r) for r in t["ranks"]), tuple(t.get("tracked_features", ())))
        for t in d["treatments"]
    )
    return SynthConfig(**d)
