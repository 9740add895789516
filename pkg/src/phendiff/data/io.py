"""Image files, manifests and batch iteration.

Tree layout written by the generator and read by :func:`load_dataset`::

    <root>/manifest.json
    <root>/ground_truth.csv
    <root>/images/<index:02d>_<condition name>/<index:02d>_<image:04d>.png

Images are 8-bit RGB PNGs; the model sees ``2x/255 - 1``.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

MANIFEST_NAME = "manifest.json"
GRID_PADDING = 2
GRID_PAD_VALUE = 255


@dataclass
class Condition:
    index: int
    name: str
    treatment: str
    rank: int
    """Concentration rank; 0 for the untreated control."""

    def to_dict(self) -> dict:
        return {"index": self.index, "name": self.name, "treatment": self.treatment, "rank": self.rank}


@dataclass
class DatasetManifest:
    root: Path
    conditions: list[Condition]
    channel_roles: dict[str, int]
    image_size: int
    files: dict[int, list[str]]
    """Condition index -> image paths relative to ``root``."""
    tracked_features: dict[str, list[str]] = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.root = Path(self.root)
        idx = [c.index for c in self.conditions]
        if idx != list(range(len(idx))):
            raise ValueError("condition indices must be dense 0..N-1 in order")

    @property
    def condition_names(self) -> list[str]:
        return [c.name for c in self.conditions]

    def condition_index(self, name: str) -> int:
        for c in self.conditions:
            if c.name == name:
                return c.index
        raise KeyError(f"unknown condition {name!r}; known: {', '.join(self.condition_names)}")

    def treatment_series(self, include_control: bool = True) -> dict[str, list[int]]:
        """Treatment name -> condition indices ordered by concentration rank."""
        control = [c.index for c in self.conditions if c.rank == 0]
        series: dict[str, list[Condition]] = {}
        for c in self.conditions:
            if c.rank > 0:
                series.setdefault(c.treatment, []).append(c)
        out = {}
        for name, conds in series.items():
            ranked = [c.index for c in sorted(conds, key=lambda c: c.rank)]
            out[name] = (control[:1] + ranked) if include_control else ranked
        return out

    def control_index(self) -> int:
        for c in self.conditions:
            if c.rank == 0:
                return c.index
        raise ValueError("manifest has no untreated (rank 0) condition")

    def to_dict(self) -> dict:
        return {
            "format": "phendiff-dataset",
            "version": 1,
            "image_size": self.image_size,
            "channel_roles": dict(self.channel_roles),
            "conditions": [c.to_dict() for c in self.conditions],
            "files": {str(k): v for k, v in sorted(self.files.items())},
            "tracked_features": self.tracked_features,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict, root: Path) -> "DatasetManifest":
        return cls(
            root=root,
            conditions=[Condition(**c) for c in d["conditions"]],
            channel_roles=d["channel_roles"],
            image_size=int(d["image_size"]),
            files={int(k): list(v) for k, v in d["files"].items()},
            tracked_features=d.get("tracked_features", {}),
            seed=d.get("seed"),
        )


def write_manifest(manifest: DatasetManifest, root: str | os.PathLike | None = None) -> Path:
    root = Path(root or manifest.root)
    path = root / MANIFEST_NAME
    tmp = path.with_name(MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.from_dict(json.loads(path.read_text()), path.parent)


def to_uint8(image) -> np.ndarray:
    """``(C, H, W)`` values in [-1, 1] -> ``(H, W, C)`` uint8, clamping at export."""
    arr = torch.as_tensor(image).detach().to(torch.float64).cpu().numpy()
    if not np.isfinite(arr).all():
        raise ValueError("cannot export non-finite image")
    arr = np.clip(arr, -1.0, 1.0)
    arr = np.rint((arr + 1.0) * 127.5).astype(np.uint8)
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def from_uint8(pixels: np.ndarray) -> torch.Tensor:
    """``(H, W, C)`` uint8 -> ``(C, H, W)`` float32 in [-1, 1]."""
    arr = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))
    return arr.to(torch.float32) * (2.0 / 255.0) - 1.0


def write_png(pixels: np.ndarray, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed compression settings keep bytes reproducible
    Image.fromarray(pixels).save(path, format="PNG", compress_level=6, optimize=False)


def read_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_images(images, names: Sequence[str], out_dir: str | os.PathLike) -> list[Path]:
    """Write each ``(C, H, W)`` image in [-1, 1] to ``out_dir/<name>.png``."""
    images = list(images)
    if len(images) != len(names):
        raise ValueError("need one name per image")
    out_dir = Path(out_dir)
    paths = []
    for image, name in zip(images, names):
        path = out_dir / f"{name}.png"
        write_png(to_uint8(image), path)
        paths.append(path)
    return paths


def compose_grid(rows, padding: int = GRID_PADDING, pad_value: int = GRID_PAD_VALUE) -> np.ndarray:
    """Tile ``rows[r][c]`` (each ``(C, H, W)`` in [-1, 1]) into one uint8 image.

    Cells are placed row-major with ``padding`` pixels of ``pad_value`` around
    and between every cell. Rows may be ragged; short rows are padded.
    """
    rows = [list(r) for r in rows]
    if not rows or not any(rows):
        raise ValueError("grid has no cells")
    first = next(c for r in rows for c in r)
    _, h, w = first.shape
    n_cols = max(len(r) for r in rows)
    ch = first.shape[0]
    H = len(rows) * (h + padding) + padding
    W = n_cols * (w + padding) + padding
    canvas = np.full((H, W, ch), pad_value, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, cell in enumerate(row):
            if tuple(cell.shape) != (ch, h, w):
                raise ValueError("all grid cells must share one shape")
            y0 = padding + i * (h + padding)
            x0 = padding + j * (w + padding)
            canvas[y0 : y0 + h, x0 : x0 + w] = to_uint8(cell)
    return canvas


def save_grid(rows, out_path: str | os.PathLike, padding: int = GRID_PADDING) -> Path:
    write_png(compose_grid(rows, padding), out_path)
    return Path(out_path)


class DatasetLoadError(RuntimeError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} unreadable dataset file(s):\n  " + "\n  ".join(problems))


@dataclass
class LabeledImages:
    """In-memory images (uint8, ``(N, C, H, W)``) with condition labels."""

    pixels: np.ndarray
    labels: np.ndarray
    manifest: DatasetManifest | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def images(self, idx=None) -> torch.Tensor:
        pix = self.pixels if idx is None else self.pixels[idx]
        return torch.from_numpy(np.ascontiguousarray(pix)).to(torch.float32) * (2.0 / 255.0) - 1.0

    def subset(self, idx) -> "LabeledImages":
        idx = np.asarray(idx)
        return LabeledImages(self.pixels[idx], self.labels[idx], self.manifest)

    def of_condition(self, label: int) -> "LabeledImages":
        return self.subset(np.flatnonzero(self.labels == label))

    def split(self, holdout_per_condition: int) -> tuple["LabeledImages", "LabeledImages"]:
        """Hold out the last ``holdout_per_condition`` images of each condition (file order)."""
        train, held = [], []
        for label in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == label)
            if holdout_per_condition >= len(idx):
                raise ValueError(f"condition {label} has only {len(idx)} images")
            cut = len(idx) - holdout_per_condition
            train.extend(idx[:cut])
            held.extend(idx[cut:])
        return self.subset(np.array(train, dtype=np.int64)), self.subset(np.array(held, dtype=np.int64))

    def batches(
        self,
        batch_size: int,
        seed: int | None = None,
        augment: bool = False,
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Yield ``(images, labels)``; shuffled when ``seed`` is given, last batch partial."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        n = len(self)
        rng = np.random.default_rng(seed) if seed is not None else None
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = self.images(idx)
            if augment:
                if rng is None:
                    rng = np.random.default_rng(0)
                flips = rng.random((len(idx), 2)) < 0.5
                for k, (fh, fv) in enumerate(flips):
                    if fh:
                        x[k] = x[k].flip(-1)
                    if fv:
                        x[k] = x[k].flip(-2)
            yield x, torch.from_numpy(self.labels[idx].astype(np.int64))


def load_dataset(manifest_path: str | os.PathLike) -> LabeledImages:
    """Decode every listed image; all unreadable files are reported together."""
    manifest = read_manifest(manifest_path)
    size = manifest.image_size
    pixels, labels, problems = [], [], []
    for cond in manifest.conditions:
        for rel in manifest.files.get(cond.index, []):
            path = manifest.root / rel
            try:
                arr = read_png(path)
            except FileNotFoundError:
                problems.append(f"{rel}: missing")
                continue
            except Exception as exc:  # PIL raises several unrelated types on corrupt data
                problems.append(f"{rel}: {exc}")
                continue
            if arr.shape != (size, size, 3):
                problems.append(f"{rel}: shape {arr.shape}, expected {(size, size, 3)}")
                continue
            pixels.append(arr.transpose(2, 0, 1))
            labels.append(cond.index)
    if problems:
        raise DatasetLoadError(problems)
    if not pixels:
        raise ValueError(f"dataset at {manifest.root} is empty")
    return LabeledImages(np.stack(pixels), np.array(labels, dtype=np.int64), manifest)


def replace_dir(tmp_dir: Path, final_dir: Path) -> None:
    """Move a fully written temp tree into place, replacing any previous tree."""
    final_dir = Path(final_dir)
    if final_dir.exists():
        backup = Path(tempfile.mkdtemp(prefix=final_dir.name + ".old.", dir=final_dir.parent))
        os.replace(final_dir, backup / "old")
        os.replace(tmp_dir, final_dir)
        shutil.rmtree(backup)
    else:
        os.replace(tmp_dir, final_dir)


def staging_dir(final_dir: str | os.PathLike) -> Path:
    final_dir = Path(final_dir)
    final_dir.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=final_dir.name + ".tmp.", dir=final_dir.parent))
