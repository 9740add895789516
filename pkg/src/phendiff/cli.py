"""Command-line entry point: ``phendiff <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (a YAML mapping whose keys are the
flag names with underscores); explicit flags override file values. Each run
writes ``run_config.yaml`` next to its outputs. Exit codes: 0 success,
1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import load_checkpoint
from .data.io import load_dataset, read_png, replace_dir, save_grid, save_images, staging_dir
from .data.synth import config_to_dict, default_config, generate_benchmark
from .diffusion import draw_noise
from .pipeline import evaluate_checkpoint, round_trip, select_sources, translate_batched
from .sampler import ddim_sample, dose_grid
from .schedule import make_subsequence
from .trainer import TrainConfig, TrainingDivergedError, train

log = logging.getLogger("phendiff")

RUN_CONFIG_NAME = "run_config.yaml"

DEFAULTS = {
    "synth": {"out": "data/benchmark", "seed": 0, "images_per_condition": 500, "image_size": 32},
    "train": {"dataset": None, "out": "runs/train", "seed": 0, "epochs": None, "batch_size": None, "lr": None},
    "sample": {"checkpoint": None, "targets": None, "images_per_condition": 8, "steps": 50, "seed": 0,
               "out": "runs/sample"},
    "invert": {"checkpoint": None, "dataset": None, "source": None, "images_per_condition": 8, "steps": 50,
               "seed": 0, "holdout": 0, "out": "runs/invert"},
    "translate": {"checkpoint": None, "dataset": None, "inputs": None, "source": None, "targets": "all",
                  "images_per_condition": 8, "steps": 50, "seed": 0, "holdout": 0, "out": "runs/translate"},
    "grid": {"checkpoint": None, "dataset": None, "source": None, "steps": 50, "seed": 0, "holdout": 0,
             "out": "runs/grid"},
    "evaluate": {"checkpoint": None, "dataset": None, "source": None, "images_per_condition": 100, "steps": 50,
                 "seed": 0, "holdout": 0, "batch_size": 128, "out": "runs/evaluate"},
}


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phendiff", description="Conditional diffusion image translation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text, *flags):
        sp = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="YAML file of option values; flags override it")
        for flag in flags:
            FLAGS[flag](sp)
        return sp

    add("synth", "generate the synthetic benchmark", "out", "seed", "images_per_condition", "image_size")
    add("train", "train the conditional denoiser", "dataset", "out", "seed", "epochs", "batch_size", "lr")
    add("sample", "generate images from noise", "checkpoint", "targets", "images_per_condition", "steps", "seed", "out")
    add("invert", "invert real images to latents and report round-trip error", "checkpoint", "dataset", "source",
        "images_per_condition", "steps", "seed", "holdout", "out")
    add("translate", "translate images from a source condition to target conditions", "checkpoint", "dataset",
        "inputs", "source", "targets", "images_per_condition", "steps", "seed", "holdout", "out")
    add("grid", "translate one source image across every treatment's concentrations", "checkpoint", "dataset",
        "source", "steps", "seed", "holdout", "out")
    add("evaluate", "translate, then score FID, reconstruction and feature correlations", "checkpoint", "dataset",
        "source", "images_per_condition", "steps", "seed", "holdout", "batch_size", "out")
    return p


FLAGS = {
    "out": lambda sp: sp.add_argument("--out", help="output path"),
    "seed": lambda sp: sp.add_argument("--seed", type=int, help="root random seed"),
    "images_per_condition": lambda sp: sp.add_argument(
        "--images-per-condition", type=int, help="images generated or processed per condition"),
    "image_size": lambda sp: sp.add_argument("--image-size", type=int, help="synthetic image side length"),
    "dataset": lambda sp: sp.add_argument("--dataset", help="dataset directory or manifest.json"),
    "epochs": lambda sp: sp.add_argument("--epochs", type=int),
    "batch_size": lambda sp: sp.add_argument("--batch-size", type=int),
    "lr": lambda sp: sp.add_argument("--lr", type=float, help="learning rate"),
    "checkpoint": lambda sp: sp.add_argument("--checkpoint", help="checkpoint file (.ckpt)"),
    "targets": lambda sp: sp.add_argument("--targets", help="comma-separated condition names, or 'all'"),
    "source": lambda sp: sp.add_argument("--source", help="source condition name (default: the untreated control)"),
    "steps": lambda sp: sp.add_argument("--steps", type=int, help="DDIM steps S"),
    "holdout": lambda sp: sp.add_argument(
        "--holdout", type=int, help="draw sources only from the last N images of the source condition"),
    "inputs": lambda sp: sp.add_argument("--inputs", help="directory of PNG images to use instead of --dataset samples"),
}


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags."""
    values = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    extra: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise UsageError(f"{path}: expected a key-value mapping")
        for key, value in data.items():
            key = key.replace("-", "_")
            if key in values:
                values[key] = value
            elif command == "train":
                extra[key] = value
            else:
                raise UsageError(f"{path}: unknown option {key!r} for {command}")
    values.update(given)
    if extra:
        values["train_config"] = extra
    return values


def _write_snapshot(values: dict, out_dir: Path) -> None:
    (out_dir / RUN_CONFIG_NAME).write_text(yaml.safe_dump(values, sort_keys=True, default_flow_style=False))


def _require(values: dict, *keys: str) -> None:
    missing = [k for k in keys if values.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _condition(names: list[str], name: str | None, default: int) -> int:
    if name is None:
        return default
    if name not in names:
        raise UsageError(f"unknown condition {name!r}; known: {', '.join(names)}")
    return names.index(name)


def _targets(names: list[str], spec) -> list[int]:
    if spec is None or spec == "all":
        return list(range(len(names)))
    items = spec if isinstance(spec, list) else [s.strip() for s in str(spec).split(",") if s.strip()]
    if not items:
        raise UsageError("no target conditions given")
    return [_condition(names, s, 0) for s in items]


def _control(names: list[str], dataset=None) -> int:
    if dataset is not None and dataset.manifest is not None:
        return dataset.manifest.control_index()
    return 0


class _Staged:
    """Write into a sibling temp directory; rename over ``final`` only on success."""

    def __init__(self, final):
        self.final = Path(final)

    def __enter__(self) -> Path:
        self.tmp = staging_dir(self.final)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            replace_dir(self.tmp, self.final)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def cmd_synth(values: dict) -> Path:
    cfg = default_config(values["images_per_condition"], values["seed"], values["image_size"])
    snapshot = {**values, "synth_config": config_to_dict(cfg)}
    out = Path(values["out"])
    generate_benchmark(cfg, out, extra_files={RUN_CONFIG_NAME: yaml.safe_dump(snapshot, sort_keys=True)})
    print(f"wrote {len(cfg.conditions())} conditions x {cfg.images_per_condition} images to {out}")
    return out


def cmd_train(values: dict) -> Path:
    _require(values, "dataset")
    base = dict(values.get("train_config", {}))
    base.update({"dataset": str(values["dataset"]), "output_dir": str(values["out"]), "seed": values["seed"]})
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
        if values.get(flag) is not None:
            base[key] = values[flag]
    cfg = TrainConfig.from_dict(base)
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot({**values, "train_config": cfg.to_dict()}, out)
    result = train(cfg)
    last = result.loss_history[-1][1] if result.loss_history else float("nan")
    print(f"trained {result.live.step} steps (final loss {last:.4f}); checkpoints in {out / 'checkpoints'}")
    return out


def cmd_sample(values: dict) -> Path:
    _require(values, "checkpoint")
    ckpt = load_checkpoint(values["checkpoint"])
    names = list(ckpt.conditions)
    targets = _targets(names, values["targets"])
    seq = make_subsequence(ckpt.schedule.T, values["steps"])
    model = ckpt.build_model()
    n = values["images_per_condition"]
    c = ckpt.config
    with _Staged(values["out"]) as tmp:
        for label in targets:
            noise = draw_noise((n, c.channels, c.image_size, c.image_size), seed=values["seed"] * 1_000_003 + label)
            images = ddim_sample(model, noise.epsilon, label, seq, ckpt.schedule).output
            save_images(images, [f"{i:04d}" for i in range(n)], tmp / names[label])
        _write_snapshot({**values, "subsequence": seq}, tmp)
    print(f"sampled {n} images for each of {len(targets)} conditions into {values['out']}")
    return Path(values["out"])


def _load_sources(values: dict, names: list[str]):
    """Source images plus their label and provenance, from ``--inputs`` or a seeded dataset sample."""
    if values.get("inputs"):
        files = sorted(Path(values["inputs"]).glob("*.png"))
        if not files:
            raise UsageError(f"no PNG images in {values['inputs']}")
        pixels = np.stack([read_png(f).transpose(2, 0, 1) for f in files])
        images = torch.from_numpy(pixels).to(torch.float32) * (2.0 / 255.0) - 1.0
        return images, _condition(names, values.get("source"), 0), [f.name for f in files], None
    _require(values, "dataset")
    data = load_dataset(values["dataset"])
    if data.manifest is not None and data.manifest.condition_names != names:
        raise UsageError("checkpoint and dataset disagree on the condition list")
    source = _condition(names, values.get("source"), _control(names, data))
    picked = select_sources(data, source, values["images_per_condition"], values["seed"], values["holdout"])
    return data.images(picked), source, [int(i) for i in picked], data


def cmd_invert(values: dict) -> Path:
    _require(values, "checkpoint")
    ckpt = load_checkpoint(values["checkpoint"])
    names = list(ckpt.conditions)
    images, source, provenance, _ = _load_sources(values, names)
    model = ckpt.build_model()
    seq = make_subsequence(ckpt.schedule.T, values["steps"])
    result = translate_batched(model, images, source, [source], seq, ckpt.schedule)
    rt = round_trip(model, images, source, values["steps"], ckpt.schedule)
    with _Staged(values["out"]) as tmp:
        np.save(tmp / "latents.npy", result.latent.numpy())
        save_images(result.reconstruction, [f"{i:04d}" for i in range(len(images))], tmp / "reconstructions")
        metrics = {"source": names[source], "inputs": provenance, "steps": values["steps"],
                   "reconstruction_mse": rt.mse, "per_image_mse": rt.per_image}
        (tmp / "inversion.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        _write_snapshot({**values, "subsequence": seq}, tmp)
    print(f"inverted {len(images)} images; round-trip MSE {rt.mse:.6f} at S={values['steps']}")
    return Path(values["out"])


def cmd_translate(values: dict) -> Path:
    _require(values, "checkpoint")
    ckpt = load_checkpoint(values["checkpoint"])
    names = list(ckpt.conditions)
    targets = _targets(names, values["targets"])
    images, source, provenance, _ = _load_sources(values, names)
    seq = make_subsequence(ckpt.schedule.T, values["steps"])
    result = translate_batched(ckpt.build_model(), images, source, targets, seq, ckpt.schedule)
    with _Staged(values["out"]) as tmp:
        save_images(images, [f"{i:04d}" for i in range(len(images))], tmp / "source")
        for label, imgs in result.targets:
            save_images(imgs, [f"{i:04d}" for i in range(len(imgs))], tmp / names[label])
        meta = {"source": names[source], "targets": [names[t] for t in targets], "inputs": provenance,
                "subsequence": seq, "outputs_per_input": len(targets)}
        (tmp / "translation.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        _write_snapshot(values, tmp)
    print(f"translated {len(images)} images from {names[source]} to {len(targets)} conditions into {values['out']}")
    return Path(values["out"])


def cmd_grid(values: dict) -> Path:
    _require(values, "checkpoint", "dataset")
    ckpt = load_checkpoint(values["checkpoint"])
    names = list(ckpt.conditions)
    images, source, provenance, data = _load_sources({**values, "images_per_condition": 1}, names)
    if data.manifest is None:
        raise UsageError("grid needs a dataset manifest to order treatments by concentration")
    series = data.manifest.treatment_series(include_control=False)
    seq = make_subsequence(ckpt.schedule.T, values["steps"])
    grid = dose_grid(ckpt.build_model(), images[0], source, list(series.items()), seq, ckpt.schedule)
    rows = [[grid.source, *row] for row in grid.images]
    with _Staged(values["out"]) as tmp:
        save_grid(rows, tmp / "grid.png")
        meta = {"source": names[source], "input": provenance, "rows": grid.treatments,
                "columns": [[names[source]] + [names[l] for l in labels] for labels in grid.labels]}
        (tmp / "grid.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        _write_snapshot(values, tmp)
    print(f"wrote {len(rows)}x{len(rows[0])} grid to {Path(values['out']) / 'grid.png'}")
    return Path(values["out"])


def cmd_evaluate(values: dict) -> Path:
    _require(values, "checkpoint", "dataset")
    ckpt = load_checkpoint(values["checkpoint"])
    data = load_dataset(values["dataset"])
    names = list(ckpt.conditions)
    source = _condition(names, values.get("source"), _control(names, data))
    report, _ = evaluate_checkpoint(ckpt, data, source, values["images_per_condition"], values["steps"],
                                    values["seed"], values["holdout"], values["batch_size"])
    report.metadata["checkpoint"]["path"] = str(values["checkpoint"])
    with _Staged(values["out"]) as tmp:
        report.write(tmp)
        _write_snapshot(values, tmp)
    tracked = report.tracked_correlations()
    for treatment, rs in tracked.items():
        shown = ", ".join(f"{f}={'undefined' if r is None else f'{r:.3f}'}" for f, r in rs.items())
        print(f"{treatment}: {shown}")
    print(f"reconstruction MSE {report.reconstruction['mean']:.6f}; "
          f"FID ranking violations {len(report.fid_ranking_violations())}; report in {values['out']}")
    return Path(values["out"])


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "invert": cmd_invert,
    "translate": cmd_translate,
    "grid": cmd_grid,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        values = resolve(args.command, args)
        COMMANDS[args.command](values)
    except (UsageError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"phendiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, OSError, RuntimeError) as exc:
        print(f"phendiff {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
