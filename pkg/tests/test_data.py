import csv
import filecmp
from pathlib import Path

import numpy as np
import pytest
import torch

from phendiff.data import (
    CellParams,
    DatasetLoadError,
    LabeledImages,
    SynthConfig,
    Treatment,
    compose_grid,
    default_config,
    generate_benchmark,
    load_dataset,
    read_ground_truth,
    read_manifest,
    save_grid,
    save_images,
)
from phendiff.data.io import from_uint8, read_png, to_uint8
from phendiff.data.synth import (
    InfeasibleLayoutError,
    config_from_dict,
    config_to_dict,
    ellipse_coverage,
    generate_condition,
    truncated_poisson_mean,
)
from phendiff.evaluation import extract_features, feature_matrix


def tiny_config(n=3, seed=0):
    return default_config(images_per_condition=n, seed=seed)


def tree_files(root):
    return sorted(p.relative_to(root).as_posix() for p in Path(root).rglob("*") if p.is_file())


def test_benchmark_layout_and_manifest(tmp_path):
    m = generate_benchmark(tiny_config(), tmp_path / "bench")
    assert len(m.conditions) == 13
    assert [c.index for c in m.conditions] == list(range(13))
    assert m.conditions[0].name == "untreated" and m.conditions[0].rank == 0
    back = read_manifest(tmp_path / "bench")
    assert back.condition_names == m.condition_names and back.files == m.files
    series = back.treatment_series()
    assert len(series) == 3 and all(len(v) == 5 and v[0] == 0 for v in series.values())
    assert back.channel_roles == {"actin": 0, "tubulin": 1, "nuclear": 2}
    gt = read_ground_truth(tmp_path / "bench")
    assert set(gt) == set(m.condition_names)
    assert gt["untreated"]["expected_count"] == 8.0
    assert not any(p.name.startswith("bench.tmp") for p in tmp_path.iterdir())


def test_generation_is_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_benchmark(tiny_config(seed=4), a)
    generate_benchmark(tiny_config(seed=4), b)
    files = tree_files(a)
    assert files == tree_files(b)
    match, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    assert not mismatch and not errors
    generate_benchmark(tiny_config(seed=5), tmp_path / "c")
    assert (a / files[-1]).read_bytes() != (tmp_path / "c" / files[-1]).read_bytes() or any(
        (a / f).read_bytes() != (tmp_path / "c" / f).read_bytes() for f in files if f.endswith(".png")
    )


def test_regeneration_replaces_previous_tree(tmp_path):
    out = tmp_path / "bench"
    generate_benchmark(tiny_config(n=4), out)
    generate_benchmark(tiny_config(n=2), out)
    assert len(load_dataset(out)) == 26


def counting_config(counts, n, size=64):
    control = CellParams(expected_count=counts[0], haze=0.0)
    ranks = tuple(CellParams(expected_count=c, haze=0.0) for c in counts[1:])
    return SynthConfig(control=control, treatments=(Treatment("t", ranks),), image_size=size,
                       images_per_condition=n, max_cells=60)


def test_extracted_counts_track_poisson_means():
    cfg = counting_config([20.0, 5.0], 200)
    for cond, params in cfg.conditions():
        imgs = [from_uint8(px) for px, _ in generate_condition(cfg, cond, params)]
        mean = feature_matrix(imgs)[:, 9].mean()
        assert abs(mean - params.expected_count) <= 0.1 * params.expected_count


def test_zero_count_curve_gives_background_only():
    cfg = counting_config([0.0, 0.0], 20, size=32)
    for cond, params in cfg.conditions():
        for px, count in generate_condition(cfg, cond, params):
            assert count == 0
            assert extract_features(from_uint8(px))["nuclei_count"] == 0


def test_ground_truth_matches_extracted_counts():
    cfg = tiny_config(n=150)
    gt = {name: row for name, row in _gt_rows(cfg).items()}
    for cond, params in cfg.conditions():
        feats = feature_matrix([from_uint8(px) for px, _ in generate_condition(cfg, cond, params)])
        expected = gt[cond.name]["mean_count"]
        # Poisson standard error at n=150 is about 0.25 for the largest means; allow 5% + 4 SE
        se = np.sqrt(expected / 150)
        assert abs(feats[:, 9].mean() - expected) <= 0.05 * expected + 4 * se, cond.name


def _gt_rows(cfg):
    from phendiff.data.synth import ground_truth_rows

    table = {}
    for name, key, value in ground_truth_rows(cfg):
        table.setdefault(name, {})[key] = value
    return table


def test_truncated_poisson_mean():
    assert truncated_poisson_mean(3.0, 1000) == pytest.approx(3.0, rel=1e-9)
    # support {0, 1}: mean = p1 / (p0 + p1) = lam / (1 + lam)
    assert truncated_poisson_mean(2.0, 1) == pytest.approx(2.0 / 3.0, rel=1e-12)


def test_infeasible_layout_names_the_condition():
    cfg = counting_config([5.0, 400.0], 1, size=16)
    cfg = SynthConfig(cfg.control, cfg.treatments, image_size=16, images_per_condition=1, max_cells=500,
                      max_layout_attempts=2)
    with pytest.raises(InfeasibleLayoutError, match="t_c1"):
        for cond, params in cfg.conditions():
            list(generate_condition(cfg, cond, params))


def test_config_validation_and_round_trip():
    cfg = default_config()
    assert config_from_dict(config_to_dict(cfg)) == cfg
    with pytest.raises(ValueError):
        SynthConfig(CellParams(-1.0), ()).validate()
    with pytest.raises(ValueError):
        SynthConfig(CellParams(1.0, red=1.5), ()).validate()
    with pytest.raises(ValueError):
        SynthConfig(CellParams(1.0, elongation=0.5), ()).validate()


def test_ellipse_coverage_area():
    cov = ellipse_coverage(64, 31.5, 31.5, 10.0, 5.0, 0.3)
    assert cov.min() == 0.0 and cov.max() == 1.0
    assert cov.sum() == pytest.approx(np.pi * 50, rel=0.01)


def test_png_round_trip_is_within_quantization(tmp_path):
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    paths = save_images(x, ["a", "b"], tmp_path)
    for img, path in zip(x, paths):
        back = from_uint8(read_png(path)).double()
        assert (back - img).abs().max().item() <= 1 / 127.5


def test_export_clamps_and_rejects_non_finite():
    x = torch.tensor([[[-3.0, 3.0]]])
    assert to_uint8(x).ravel().tolist() == [0, 255]
    with pytest.raises(ValueError):
        to_uint8(torch.tensor([[[float("nan")]]]))


def test_save_empty_list(tmp_path):
    assert save_images([], [], tmp_path / "none") == []
    assert not (tmp_path / "none").exists()


def test_single_cell_grid_is_padded_image(tmp_path):
    img = torch.rand(3, 5, 7) * 2 - 1
    grid = compose_grid([[img]], padding=2)
    assert grid.shape == (9, 11, 3)
    assert np.array_equal(grid[2:7, 2:9], to_uint8(img))
    border = grid.copy()
    border[2:7, 2:9] = 255
    assert (border == 255).all()
    save_grid([[img]], tmp_path / "g.png")
    save_images([img], ["single"], tmp_path)
    assert np.array_equal(read_png(tmp_path / "g.png")[2:7, 2:9], read_png(tmp_path / "single.png"))
    with pytest.raises(ValueError):
        compose_grid([])


def test_missing_and_corrupt_files_are_reported_together(tmp_path):
    root = tmp_path / "bench"
    m = generate_benchmark(tiny_config(n=2), root)
    missing = m.files[3][1]
    corrupt = m.files[7][0]
    (root / missing).unlink()
    (root / corrupt).write_bytes(b"garbage")
    with pytest.raises(DatasetLoadError) as info:
        load_dataset(root)
    assert len(info.value.problems) == 2
    assert missing in str(info.value) and corrupt in str(info.value)


def test_load_dataset_values_and_batches(tmp_path):
    root = tmp_path / "bench"
    generate_benchmark(tiny_config(n=3), root)
    data = load_dataset(root / "manifest.json")
    assert len(data) == 39 and data.pixels.dtype == np.uint8
    assert np.bincount(data.labels).tolist() == [3] * 13
    x = data.images()
    assert x.min() >= -1 and x.max() <= 1
    batches = list(data.batches(10))
    assert [len(b[1]) for b in batches] == [10, 10, 10, 9]
    a = [y.tolist() for _, y in data.batches(10, seed=1)]
    b = [y.tolist() for _, y in data.batches(10, seed=1)]
    assert a == b and sum(a, []) != data.labels.tolist()
    with pytest.raises(ValueError):
        list(data.batches(0))


def test_augmentation_only_flips():
    pixels = np.arange(2 * 3 * 4 * 4, dtype=np.uint8).reshape(2, 3, 4, 4)
    data = LabeledImages(pixels, np.array([0, 1]))
    plain = data.images()
    for x, _ in data.batches(2, seed=3, augment=True):
        for k in range(2):
            options = [f(p) for p in plain for f in (lambda v: v, lambda v: v.flip(-1), lambda v: v.flip(-2),
                                                     lambda v: v.flip(-1).flip(-2))]
            assert any(torch.equal(x[k], o) for o in options)


def test_split_holds_out_last_images_per_condition():
    data = LabeledImages(np.zeros((9, 3, 2, 2), np.uint8), np.array([0, 0, 0, 1, 1, 1, 2, 2, 2]))
    data.pixels[:, 0, 0, 0] = np.arange(9)
    train, held = data.split(1)
    assert held.pixels[:, 0, 0, 0].tolist() == [2, 5, 8]
    assert len(train) == 6
    with pytest.raises(ValueError):
        data.split(3)
