import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from phendiff.evaluation import (
    FEATURE_NAMES,
    GaussianMoments,
    RandomProjectionEmbedder,
    condition_mean_correlation,
    extract_features,
    fid,
    frechet_distance,
    pearson,
    reconstruction_loss,
    two_sided_t_test,
)
from phendiff.evaluation.features import elongation


def brute_force_fd(mu1, s1, mu2, s2):
    """Trace of sqrt(S1 S2) from the eigenvalues of the non-symmetric product."""
    evals = np.linalg.eigvals(s1 @ s2)
    tr_sqrt = np.sum(np.sqrt(np.clip(evals.real, 0, None)))
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)


def sqrtm_fd(mu1, s1, mu2, s2):
    covmean = scipy.linalg.sqrtm(s1 @ s2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean))


def random_psd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_fd_scalar_by_hand():
    a = GaussianMoments([0.0], [[1.0]])
    b = GaussianMoments([1.0], [[4.0]])
    assert frechet_distance(a, b, eps=0.0) == pytest.approx(2.0, abs=1e-12)
    assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-6)


def test_fd_identical_is_zero():
    rng = np.random.default_rng(0)
    m = GaussianMoments(rng.standard_normal(6), random_psd(rng, 6))
    assert abs(frechet_distance(m, m)) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_fd_matches_brute_force_oracles(d, seed):
    rng = np.random.default_rng(seed)
    mu1, mu2 = rng.standard_normal(d), rng.standard_normal(d)
    s1, s2 = random_psd(rng, d), random_psd(rng, d)
    ours = frechet_distance(GaussianMoments(mu1, s1), GaussianMoments(mu2, s2), eps=0.0)
    scale = max(1.0, abs(ours))
    assert ours == pytest.approx(brute_force_fd(mu1, s1, mu2, s2), abs=1e-6 * scale)
    assert ours == pytest.approx(sqrtm_fd(mu1, s1, mu2, s2), abs=1e-6 * scale)
    rev = frechet_distance(GaussianMoments(mu2, s2), GaussianMoments(mu1, s1), eps=0.0)
    assert abs(ours - rev) <= 1e-9 * scale
    assert ours >= 0


def test_moments_validation():
    with pytest.raises(ValueError):
        GaussianMoments([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianMoments([0.0], np.eye(2))
    with pytest.raises(ValueError):
        frechet_distance(GaussianMoments([0.0], [[1.0]]), GaussianMoments([0.0, 0.0], np.eye(2)))


def test_fid_properties():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(100, 3, 32, 32, generator=gen) * 2 - 1
    y = torch.rand(100, 3, 32, 32, generator=gen) * 1.5 - 0.5
    emb = RandomProjectionEmbedder()
    assert abs(fid(x, x, emb)) <= 1e-6
    xy, yx = fid(x, y, emb), fid(y, x, emb)
    assert xy > 0
    assert abs(xy - yx) <= 1e-9 * max(1.0, xy)
    perm = torch.randperm(100, generator=gen)
    assert fid(x[perm], y, emb) == pytest.approx(xy, rel=1e-9)
    with pytest.raises(ValueError, match="at least 65"):
        fid(x[:64], y, emb)


def test_embedder_is_seeded_and_fit_standardizes():
    x = torch.rand(80, 3, 32, 32) * 0.2 + 0.5
    a, b = RandomProjectionEmbedder(seed=3), RandomProjectionEmbedder(seed=3)
    np.testing.assert_array_equal(a(x), b(x))
    assert not np.allclose(a(x), RandomProjectionEmbedder(seed=4)(x))
    a.fit(x)
    pooled = torch.nn.functional.adaptive_avg_pool2d(x.double(), 8).numpy()
    z = (pooled - a.channel_mean[None, :, None, None]) / a.channel_std[None, :, None, None]
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-6)
    assert a.state()["dim"] == 64


def test_reconstruction_loss_by_hand():
    zeros, ones = torch.zeros(2, 2, 1), torch.ones(2, 2, 1)
    res = reconstruction_loss(zeros, ones)
    assert res.sum == 4.0 and res.mean == 1.0
    x = torch.randn(3, 3, 4, 4)
    assert reconstruction_loss(x, x).sum == 0.0
    with pytest.raises(ValueError):
        reconstruction_loss(zeros, torch.zeros(2, 1))


def blank():
    return -np.ones((3, 32, 32))


def test_background_has_no_nuclei():
    f = extract_features(blank())
    assert f["nuclear_fraction"] == 0 and f["nuclei_count"] == 0
    assert list(f) == list(FEATURE_NAMES)


def test_square_blob_features():
    img = blank()
    img[2, 10:15, 20:25] = 0.8
    f = extract_features(img)
    assert f["nuclei_count"] == 1
    assert f["nucleus_area"] == 25
    assert f["nucleus_elongation"] == pytest.approx(1.0, abs=1e-6)
    assert f["nucleus_intensity"] == pytest.approx(0.8)
    assert f["nuclear_fraction"] == pytest.approx(25 / 1024)


def test_elongation_of_a_bar():
    rows, cols = np.nonzero(np.ones((2, 8)))
    # variances (1/4 + 1/12) and (63/12 + 1/12) for a 2x8 block of unit squares
    assert elongation(rows, cols) == pytest.approx(math.sqrt((64 / 12) / (4 / 12)), rel=1e-12)


def test_planted_blobs_are_counted_and_tiny_ones_dropped():
    rng = np.random.default_rng(5)
    for k in range(0, 9):
        img = blank()
        for j in range(k):
            r, c = 1 + 7 * (j // 4), 1 + 8 * (j % 4)
            h, w = rng.integers(2, 5, size=2)
            img[2, r : r + h, c : c + w] = 0.5
        img[2, 30, 30] = 0.5  # single pixel, below the area floor
        assert extract_features(img)["nuclei_count"] == k


def test_diagonal_contact_does_not_merge():
    img = blank()
    img[2, 4:6, 4:6] = 1
    img[2, 6:8, 6:8] = 1
    assert extract_features(img)["nuclei_count"] == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(-8, 8), st.integers(-8, 8))
def test_features_are_translation_consistent(h, w, dr, dc):
    img = blank()
    img[2, 12 : 12 + h, 12 : 12 + w] = 0.6
    moved = np.roll(img, (dr, dc), axis=(1, 2))
    a, b = extract_features(img), extract_features(moved)
    for name in ("nuclei_count", "nucleus_area", "nucleus_elongation"):
        assert a[name] == pytest.approx(b[name], abs=1e-12)


def test_features_accept_tensors_and_reject_bad_shapes():
    img = blank()
    assert extract_features(torch.from_numpy(img)) == extract_features(img)
    with pytest.raises(ValueError):
        extract_features(np.zeros((32, 32, 3)))


@pytest.mark.parametrize(
    "a,b,r", [([1, 2, 3], [2, 4, 6], 1.0), ([1, 2, 3], [3, 2, 1], -1.0), ([1, 2, 4], [1, 3, 4], 13 / 14)]
)
def test_pearson_examples(a, b, r):
    assert pearson(a, b) == pytest.approx(r, abs=1e-4)
    assert pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)


def test_pearson_hand_computation():
    # deviations (-4, -1, 5)/3 and (-5, 1, 4)/3: dot 39/9, both squared norms 42/9
    assert pearson([1, 2, 4], [1, 3, 4]) == pytest.approx(39 / 42, abs=1e-12)


def test_pearson_undefined_on_constant_input():
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    assert pearson([1, 2, 3], [5, 5, 5]) is None
    with pytest.raises(ValueError):
        pearson([1], [1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=8), st.randoms())
def test_pearson_bounded_and_permutation_invariant(pairs, rnd):
    a, b = map(list, zip(*pairs))
    r = pearson(a, b)
    if r is None:
        return
    assert -1.0 <= r <= 1.0
    perm = list(range(len(a)))
    rnd.shuffle(perm)
    r2 = pearson([a[i] for i in perm], [b[i] for i in perm])
    assert r2 == pytest.approx(r, abs=1e-9)


def planted(count, nuclear_level, n=4):
    imgs = []
    for i in range(n):
        img = blank()
        img[0] = -1 + 0.1 * count
        for j in range(count):
            img[2, 1 + 7 * (j // 4) : 4 + 7 * (j // 4), 1 + 8 * (j % 4) : 4 + 8 * (j % 4)] = nuclear_level
        imgs.append(img)
    return np.stack(imgs)


def test_condition_mean_correlation_recovers_planted_trends():
    counts = [8, 6, 4, 2]
    real = {c: planted(k, 0.5) for c, k in enumerate(counts)}
    gen = {c: planted(k, 0.9) for c, k in enumerate(counts)}
    res = condition_mean_correlation(real, gen, {"drug": [0, 1, 2, 3]})["drug"]
    assert res.r["nuclei_count"] == pytest.approx(1.0)
    assert res.r["mean_red"] == pytest.approx(1.0)
    assert res.r["std_green"] is None
    assert res.real_means["nuclei_count"] == counts

    rev = condition_mean_correlation(real, gen, {"drug": [3, 1, 0, 2]})["drug"]
    assert rev.r["nuclei_count"] == pytest.approx(res.r["nuclei_count"])
    with pytest.raises(ValueError):
        condition_mean_correlation(real, gen, {"drug": [0, 1]})
    with pytest.raises(ValueError):
        condition_mean_correlation(real, gen, {"drug": [0, 1, 7]})


def test_t_test_matches_hand_statistic():
    a, b = [1.0, 2.0, 3.0, 4.0], [3.0, 4.0, 5.0, 6.0]
    res = two_sided_t_test(a, b)
    # pooled variance 5/3, se = sqrt(5/3 * (1/4 + 1/4))
    assert res.statistic == pytest.approx(-2 / math.sqrt(5 / 6), rel=1e-12)
    assert 0.0 < res.p_value < 1.0
