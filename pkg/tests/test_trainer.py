import csv
import json

import numpy as np
import pytest
import torch

from phendiff.checkpoint import load_checkpoint, save_checkpoint
from phendiff.data.io import LabeledImages
from phendiff.trainer import TrainConfig, TrainingDivergedError, derive_seed, ema_update, read_config, train

TINY = dict(base_width=4, channel_multipliers=(1, 2), blocks_per_level=1, embed_dim=8, T=100, log_every=0)


def tiny_dataset(n=12, conditions=2, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 3, 8, 8), dtype=np.uint8)
    labels = np.arange(n) % conditions
    return LabeledImages(pixels, labels)


def test_ema_update_by_hand():
    ema = {"w": torch.zeros((), dtype=torch.float64)}
    ema_update(ema, {"w": torch.ones((), dtype=torch.float64)}, 0.999)
    assert ema["w"].item() == pytest.approx(0.001, abs=1e-15)


def test_ema_decay_zero_copies_live():
    live = {"w": torch.randn(3, 3)}
    ema = ema_update({"w": torch.zeros(3, 3)}, live, 0.0)
    assert torch.equal(ema["w"], live["w"])


@pytest.mark.parametrize("decay", [0.5, 0.9, 0.999])
def test_ema_geometric_series(decay):
    v = 2.5
    ema = {"w": torch.zeros(4, dtype=torch.float64)}
    live = {"w": torch.full((4,), v, dtype=torch.float64)}
    for _ in range(10):
        ema_update(ema, live, decay)
    expected = (1 - decay**10) * v
    assert torch.allclose(ema["w"], torch.full((4,), expected, dtype=torch.float64), rtol=0, atol=1e-12)


def test_ema_rejects_mismatch():
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"v": torch.zeros(2)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.zeros(2)}, 1.0)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, 1, e) for e in range(100)}) == 100


@pytest.mark.parametrize("kwargs", [dict(batch_size=0), dict(learning_rate=0.0), dict(ema_decay=1.0), dict(epochs=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs).validate()


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    cfg = TrainConfig(**TINY)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_epochs_returns_initial_weights(tmp_path):
    cfg = TrainConfig(epochs=0, output_dir=str(tmp_path), **TINY)
    res = train(cfg, tiny_dataset())
    assert res.loss_history == []
    assert res.live.step == 0
    assert all(torch.equal(res.live.state[k], res.ema.state[k]) for k in res.live.state)
    assert (tmp_path / "checkpoints" / "final-live.ckpt").is_file()
    assert read_config(tmp_path / "train_config.yaml")["epochs"] == 0


def test_step_count_and_logs(tmp_path):
    data = tiny_dataset(n=10)
    cfg = TrainConfig(epochs=2, batch_size=4, output_dir=str(tmp_path), checkpoint_every=3, ema_decay=0.9, **TINY)
    res = train(cfg, data)
    assert [s for s, _ in res.loss_history] == list(range(1, 7))
    assert all(np.isfinite(v) for _, v in res.loss_history)
    rows = list(csv.DictReader(open(tmp_path / "loss.csv")))
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert [float(r["loss"]) for r in rows] == [v for _, v in res.loss_history]
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert "step-0000003-ema.ckpt" in names and "step-0000006-live.ckpt" in names
    for ck in (res.live, res.ema):
        assert all(torch.isfinite(v).all() for v in ck.state.values())
    assert any(not torch.equal(res.live.state[k], res.ema.state[k]) for k in res.live.state)


def test_training_is_reproducible(tmp_path):
    data = tiny_dataset()
    runs = []
    for name in ("a", "b"):
        cfg = TrainConfig(epochs=2, batch_size=5, seed=9, output_dir=str(tmp_path / name), **TINY)
        runs.append(train(cfg, data))
    assert runs[0].loss_history == runs[1].loss_history
    a = (tmp_path / "a" / "checkpoints" / "final-ema.ckpt").read_bytes()
    b = (tmp_path / "b" / "checkpoints" / "final-ema.ckpt").read_bytes()
    assert a == b


def test_resume_continues_step_counter(tmp_path):
    data = tiny_dataset()
    first = TrainConfig(epochs=1, batch_size=6, output_dir=str(tmp_path / "a"), **TINY)
    train(first, data)
    second = TrainConfig(epochs=1, batch_size=6, output_dir=str(tmp_path / "b"),
                         init_from=str(tmp_path / "a" / "checkpoints" / "final-live.ckpt"), **TINY)
    res = train(second, data)
    assert res.live.step == 4


def test_training_reduces_loss_on_a_tiny_problem(tmp_path):
    data = LabeledImages(np.full((16, 3, 8, 8), 200, dtype=np.uint8), np.arange(16) % 2)
    cfg = TrainConfig(epochs=200, batch_size=16, learning_rate=3e-3, output_dir=str(tmp_path), **TINY)
    hist = [v for _, v in train(cfg, data).loss_history]
    assert np.mean(hist[-10:]) < 0.5 * np.mean(hist[:10])


def test_inf_parameter_aborts_with_diagnostic(tmp_path):
    data = tiny_dataset()
    start = train(TrainConfig(epochs=0, output_dir=str(tmp_path / "init"), **TINY), data).live
    name = next(k for k in start.state if k.startswith("conv_in") and k.endswith("weight"))
    start.state[name][0, 0, 0, 0] = float("inf")
    save_checkpoint(start, tmp_path / "bad-live.ckpt")
    cfg = TrainConfig(epochs=1, batch_size=4, output_dir=str(tmp_path / "run"), init_from=str(tmp_path / "bad-live.ckpt"), **TINY)
    with pytest.raises(TrainingDivergedError) as info:
        train(cfg, data)
    assert info.value.step == 0
    diag = json.loads((tmp_path / "run" / "diverged.json").read_text())
    assert diag["step"] == 0
    assert not (tmp_path / "run" / "checkpoints" / "final-live.ckpt").exists()


def test_rejects_empty_and_out_of_range(tmp_path):
    cfg = TrainConfig(output_dir=str(tmp_path), **TINY)
    with pytest.raises(ValueError):
        train(cfg, LabeledImages(np.zeros((0, 3, 8, 8), np.uint8), np.zeros(0, np.int64)))
    with pytest.raises(ValueError):
        train(cfg)
