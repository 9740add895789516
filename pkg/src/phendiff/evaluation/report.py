"""Assemble FID, reconstruction and correlation results into one report."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .features import FEATURE_NAMES, feature_matrix
from .fid import GaussianMoments, RandomProjectionEmbedder, frechet_distance
from .stats import condition_mean_correlation, correlation_histogram, reconstruction_loss, two_sided_t_test

REPORT_NAME = "report.json"
CORRELATIONS_NAME = "correlations.csv"
FID_MATRIX_NAME = "fid_matrix.csv"
T_TEST_FEATURE = "nucleus_area"


@dataclass
class EvalReport:
    """Serialized as ``report.json`` plus ``correlations.csv`` and ``fid_matrix.csv``.

    ``fid`` maps each condition to FID(real_c, gen_c); ``fid_matrix[i][j]`` is
    FID(real_i, gen_j). ``correlations[treatment][feature]`` is a Pearson r or
    ``None`` when undefined. ``t_tests[condition]`` compares ``nucleus_area``
    against the control group, separately for real and generated images.
    """

    conditions: list[str]
    fid: dict[str, float]
    fid_matrix: list[list[float]]
    reconstruction: dict
    correlations: dict[str, dict[str, float | None]]
    tracked_features: dict[str, list[str]]
    histogram: dict[str, dict]
    t_tests: dict[str, dict]
    condition_means: dict[str, dict[str, dict[str, float]]]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**dict(d))

    def tracked_correlations(self) -> dict[str, dict[str, float | None]]:
        return {t: {f: self.correlations[t][f] for f in feats} for t, feats in self.tracked_features.items()}

    def fid_ranking_violations(self) -> list[tuple[str, str]]:
        """Pairs ``(c, c')`` with ``c != c'`` where FID(real_c, gen_c') <= FID(real_c, gen_c)."""
        out = []
        for i, name in enumerate(self.conditions):
            for j, other in enumerate(self.conditions):
                if i != j and self.fid_matrix[i][j] <= self.fid_matrix[i][i]:
                    out.append((name, other))
        return out

    def write(self, out_dir: str | os.PathLike) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / REPORT_NAME).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out_dir / CORRELATIONS_NAME, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["feature", "treatment", "r"])
            for treatment, rs in self.correlations.items():
                for feature, r in rs.items():
                    w.writerow([feature, treatment, "undefined" if r is None else repr(r)])
        with open(out_dir / FID_MATRIX_NAME, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["real\\generated", *self.conditions])
            for name, row in zip(self.conditions, self.fid_matrix):
                w.writerow([name, *map(repr, row)])
        return out_dir / REPORT_NAME


def read_report(path: str | os.PathLike) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_NAME
    return EvalReport.from_dict(json.loads(path.read_text()))


def build_report(
    conditions: Sequence[str],
    real_sets: Mapping[int, torch.Tensor],
    gen_sets: Mapping[int, torch.Tensor],
    treatment_grouping: Mapping[str, Sequence[int]],
    tracked_features: Mapping[str, Sequence[str]] | None = None,
    source_images: torch.Tensor | None = None,
    reconstructions: torch.Tensor | None = None,
    control: int = 0,
    embedder=None,
    metadata: Mapping | None = None,
) -> EvalReport:
    """Compute every metric from in-memory real and generated sets.

    ``real_sets`` / ``gen_sets`` map condition index to ``(N, 3, H, W)``
    images in [-1, 1]. The embedder defaults to one fitted on all real images.
    """
    n = len(conditions)
    missing = [c for c in range(n) if c not in real_sets or c not in gen_sets]
    if missing:
        raise ValueError(f"conditions {missing} lack real or generated images")
    if embedder is None:
        embedder = RandomProjectionEmbedder().fit(torch.cat([torch.as_tensor(real_sets[c]) for c in range(n)]))

    real_moments = [GaussianMoments.fit(embedder(real_sets[c])) for c in range(n)]
    gen_moments = [GaussianMoments.fit(embedder(gen_sets[c])) for c in range(n)]
    for c in range(n):
        d = real_moments[c].dim
        for side, sets in (("real", real_sets), ("generated", gen_sets)):
            if len(sets[c]) < d + 1:
                raise ValueError(f"{side} set for {conditions[c]!r} has {len(sets[c])} images; need at least {d + 1}")
    matrix = [[frechet_distance(real_moments[i], gen_moments[j]) for j in range(n)] for i in range(n)]

    corr = condition_mean_correlation(real_sets, gen_sets, treatment_grouping)
    real_feats = {c: feature_matrix(real_sets[c]) for c in range(n)}
    gen_feats = {c: feature_matrix(gen_sets[c]) for c in range(n)}
    means = {
        conditions[c]: {
            "real": dict(zip(FEATURE_NAMES, real_feats[c].mean(axis=0).tolist())),
            "generated": dict(zip(FEATURE_NAMES, gen_feats[c].mean(axis=0).tolist())),
        }
        for c in range(n)
    }

    j = FEATURE_NAMES.index(T_TEST_FEATURE)
    t_tests = {}
    for c in range(n):
        if c == control:
            continue
        entry = {}
        for side, feats in (("real", real_feats), ("generated", gen_feats)):
            res = two_sided_t_test(feats[control][:, j], feats[c][:, j])
            entry[side] = asdict(res)
        t_tests[conditions[c]] = entry

    recon: dict = {}
    if source_images is not None and reconstructions is not None:
        per_image = [reconstruction_loss(a, b).mean for a, b in zip(source_images, reconstructions)]
        recon = {"mean": float(np.mean(per_image)), "per_image": per_image}

    tracked = {t: list(v) for t, v in (tracked_features or {}).items()}
    return EvalReport(
        conditions=list(conditions),
        fid={conditions[c]: matrix[c][c] for c in range(n)},
        fid_matrix=matrix,
        reconstruction=recon,
        correlations={t: dict(res.r) for t, res in corr.items()},
        tracked_features=tracked,
        histogram=correlation_histogram(corr),
        t_tests=t_tests,
        condition_means=means,
        metadata={"embedder": embedder.state() if hasattr(embedder, "state") else repr(embedder), **dict(metadata or {})},
    )
