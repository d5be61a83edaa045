import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as hst

from octfp import metrics as mx
from octfp.tensorio import Image2D, ValidationError, Volume3D, read_volume


# ---------------------------------------------------------------------------
# SSIM closed forms and properties
# ---------------------------------------------------------------------------

def test_ssim_self_is_one(rng):
    a = rng.uniform(0, 1, (24, 24)).astype(np.float32)
    assert abs(mx.ssim(a, a) - 1.0) < 1e-9
    v = rng.uniform(0, 1, (6, 12, 12)).astype(np.float32)
    assert abs(mx.ssim(v, v) - 1.0) < 1e-9


def test_ssim_constant_vs_constant_luminance_formula():
    # zero variances leave only the luminance factor, hand-evaluated here
    mu1, mu2 = 0.2, 0.8
    a = np.full((16, 16), mu1)
    b = np.full((16, 16), mu2)
    hand = (2 * mu1 * mu2 + mx.SSIM_C1) / (mu1 ** 2 + mu2 ** 2 + mx.SSIM_C1)
    assert abs(mx.ssim(a, b) - hand) < 1e-6


def test_ssim_anticorrelated_is_negative():
    yy, xx = np.meshgrid(np.arange(24), np.arange(24), indexing="ij")
    a = (0.5 + 0.4 * np.sin(2 * np.pi * xx / 6)).astype(np.float64)
    assert mx.ssim(a, 1.0 - a) < 0.0


def test_ssim_symmetry(rng):
    for _ in range(5):
        a = rng.uniform(0, 1, (16, 16))
        b = rng.uniform(0, 1, (16, 16))
        assert abs(mx.ssim(a, b) - mx.ssim(b, a)) < 1e-9


def test_ssim_shape_mismatch():
    with pytest.raises(ValidationError):
        mx.ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def _central_diff_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)


def test_ssim3d_gradient_matches_central_differences(rng):
    x = rng.uniform(0.2, 0.8, (4, 4, 4))
    y = rng.uniform(0.2, 0.8, (4, 4, 4))
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    loss = mx.ssim3d(xt, torch.tensor(y, dtype=torch.float64))
    loss.backward()
    analytic = xt.grad.numpy()
    numeric = _central_diff_grad(
        lambda arr: mx.ssim3d(torch.tensor(arr), torch.tensor(y)).item(), x)
    assert _rel_err(analytic, numeric) < 1e-4


# ---------------------------------------------------------------------------
# Gaussian stats and Frechet distance
# ---------------------------------------------------------------------------

def test_gaussian_stats_hand_case():
    stats = mx.gaussian_stats([np.array([0.0, 0.0]), np.array([2.0, 2.0])])
    assert np.allclose(stats.mean, [1.0, 1.0])
    assert np.allclose(stats.covariance, [[2.0, 2.0], [2.0, 2.0]])


def test_gaussian_stats_degenerate_and_errors():
    stats = mx.gaussian_stats([np.ones(3)] * 4)
    assert np.allclose(stats.covariance, 0.0)
    with pytest.raises(ValidationError):
        mx.gaussian_stats([np.ones(3)])


def test_frechet_identical_is_zero(rng):
    feats = rng.standard_normal((20, 5))
    s = mx.gaussian_stats(feats)
    assert mx.frechet_distance(s, s) < 1e-8


def test_frechet_1d_unit_shift():
    s1 = mx.GaussianStats(np.array([0.0]), np.array([[1.0]]))
    s2 = mx.GaussianStats(np.array([1.0]), np.array([[1.0]]))
    assert abs(mx.frechet_distance(s1, s2) - 1.0) < 1e-10


def test_frechet_commuting_diagonal():
    s1 = mx.GaussianStats(np.zeros(2), np.diag([1.0, 4.0]))
    s2 = mx.GaussianStats(np.zeros(2), np.diag([4.0, 1.0]))
    assert abs(mx.frechet_distance(s1, s2) - 2.0) < 1e-8


def test_frechet_symmetry(rng):
    a = rng.standard_normal((30, 4))
    b = rng.standard_normal((25, 4)) * 1.5 + 0.3
    s1, s2 = mx.gaussian_stats(a), mx.gaussian_stats(b)
    assert abs(mx.frechet_distance(s1, s2) - mx.frechet_distance(s2, s1)) < 1e-8


def test_frechet_dimension_mismatch():
    s1 = mx.GaussianStats(np.zeros(2), np.eye(2))
    s2 = mx.GaussianStats(np.zeros(3), np.eye(3))
    with pytest.raises(ValidationError):
        mx.frechet_distance(s1, s2)


def test_gaussian_stats_asymmetry_rejected():
    cov = np.array([[1.0, 0.5], [0.2, 1.0]])
    with pytest.raises(ValidationError):
        mx.GaussianStats(np.zeros(2), cov)


# ---------------------------------------------------------------------------
# FID / FVD and embedders
# ---------------------------------------------------------------------------

def test_embedder_deterministic(rng):
    img = Image2D(rng.uniform(0, 1, (32, 32)).astype(np.float32))
    e1 = mx.RandomConvEmbedder(seed=0)
    e2 = mx.RandomConvEmbedder(seed=0)
    assert np.array_equal(e1(img), e2(img))
    assert e1(img).shape == (64,)
    vol = Volume3D(rng.uniform(0, 1, (8, 16, 16)).astype(np.float32))
    assert e1(vol).shape == (64,)


def test_fid_identical_sets_zero(rng):
    imgs = [Image2D(rng.uniform(0, 1, (16, 16)).astype(np.float32))
            for _ in range(6)]
    assert mx.fid_score(imgs, imgs) < 1e-6


def test_fvd_separates_noise_from_phantoms(small_manifest, rng):
    vols = [read_volume(small_manifest.resolve(e, "volume"))
            for e in small_manifest.entries]
    real_a, real_b = vols[:10], vols[10:20]
    noise = [Volume3D(rng.uniform(0, 1, real_a[0].values.shape).astype(np.float32))
             for _ in range(10)]
    emb = mx.RandomConvEmbedder(seed=0)
    d_real = mx.fvd_score(real_a, real_b, emb)
    d_noise = mx.fvd_score(real_a, noise, emb)
    assert d_noise > d_real


def test_bscan_slices(rng):
    v = Volume3D(rng.uniform(0, 1, (8, 16, 12)).astype(np.float32))
    slices = mx.bscan_slices(v, step=4)
    assert len(slices) == 4
    assert slices[0].values.shape == (8, 12)
    assert np.array_equal(slices[1].values, v.values[:, 4, :])


def test_feature_file_roundtrip(tmp_path, rng):
    feats = rng.standard_normal((7, 5)).astype(np.float32)
    path = tmp_path / "f.p2f"
    mx.write_feature_file(feats, path)
    back = mx.read_feature_file(path)
    assert np.allclose(back, feats, atol=1e-7)
    assert mx.frechet_from_features(back, back) < 1e-8
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValidationError):
        mx.read_feature_file(path)


# ---------------------------------------------------------------------------
# ROC / EER / TAR with a brute-force oracle
# ---------------------------------------------------------------------------

def _brute_force_rates(genuine, impostor):
    """O(n^2) counting sweep, kept deliberately naive and independent."""
    thresholds = [-math.inf] + sorted(set(list(genuine) + list(impostor))) + [math.inf]
    points = []
    for t in thresholds:
        far = sum(1 for s in impostor if s >= t) / len(impostor)
        frr = sum(1 for s in genuine if s < t) / len(genuine)
        points.append((far, frr, t))
    return points


def _brute_force_eer(genuine, impostor):
    points = _brute_force_rates(genuine, impostor)
    for i in range(1, len(points)):
        f0, r0, _ = points[i - 1]
        f1, r1, _ = points[i]
        if f1 - r1 <= 0.0:
            alpha = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + alpha * (f1 - f0)
    raise AssertionError("no crossing found")


def _brute_force_tar(genuine, impostor, far_target):
    points = _brute_force_rates(genuine, impostor)
    for i in range(1, len(points)):
        f0, r0, _ = points[i - 1]
        f1, r1, _ = points[i]
        if f1 <= far_target:
            alpha = (f0 - far_target) / (f0 - f1)
            return 1.0 - (r0 + alpha * (r1 - r0))
    raise AssertionError("no admissible threshold")


def test_roc_hand_counted_case():
    s = mx.ScoreSet(np.array([0.9, 0.8, 0.7, 0.2]), np.array([0.6, 0.4, 0.3, 0.1]))
    points = mx.roc_points(s)
    assert any(f == 0.0 and abs(r - 0.25) < 1e-12 for f, r, _ in points)
    fars = [f for f, _, _ in points]
    frrs = [r for _, r, _ in points]
    assert all(a >= b for a, b in zip(fars, fars[1:]))       # FAR non-increasing
    assert all(a <= b for a, b in zip(frrs, frrs[1:]))       # FRR non-decreasing


def test_eer_perfectly_separated():
    s = mx.ScoreSet(np.full(5, 1.0), np.zeros(5))
    assert mx.eer(s) == 0.0
    assert mx.tar_at_far(s, 0.001) == 1.0
    assert mx.tar_at_far(s, 0.1) == 1.0


def test_eer_identical_distributions(rng):
    scores = rng.uniform(0, 1, 40)
    s = mx.ScoreSet(scores, scores.copy())
    assert abs(mx.eer(s) - 0.5) < 1e-12


def test_eer_tar_match_brute_force_oracle():
    g = np.random.default_rng(77)
    for trial in range(50):
        n_gen = int(g.integers(5, 201))
        n_imp = int(g.integers(5, 201))
        genuine = g.normal(0.6, 0.25, n_gen)
        impostor = g.normal(0.4, 0.25, n_imp)
        if trial % 7 == 0:  # inject ties
            genuine = np.round(genuine, 1)
            impostor = np.round(impostor, 1)
        s = mx.ScoreSet(genuine, impostor)
        assert abs(mx.eer(s) - _brute_force_eer(genuine, impostor)) < 1e-9
        for far_target in (0.001, 0.01, 0.1):
            assert abs(mx.tar_at_far(s, far_target)
                       - _brute_force_tar(genuine, impostor, far_target)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=hst.integers(0, 2 ** 31))
def test_roc_monotonicity_property(seed):
    g = np.random.default_rng(seed)
    s = mx.ScoreSet(g.uniform(0, 1, int(g.integers(1, 50))),
                    g.uniform(0, 1, int(g.integers(1, 50))))
    points = mx.roc_points(s)
    fars = [f for f, _, _ in points]
    frrs = [r for _, r, _ in points]
    assert all(a >= b for a, b in zip(fars, fars[1:]))
    assert all(a <= b for a, b in zip(frrs, frrs[1:]))
    assert 0.0 <= mx.eer(s) <= 1.0


def test_score_file_roundtrip(tmp_path):
    s = mx.ScoreSet(np.array([0.25, 0.5]), np.array([0.125]))
    path = tmp_path / "scores.txt"
    mx.write_score_file(s, path)
    back = mx.read_score_file(path)
    assert np.array_equal(back.genuine, s.genuine)
    assert np.array_equal(back.impostor, s.impostor)
    path.write_text("genuine 0.5\nbogus 1.0\n")
    with pytest.raises(ValidationError):
        mx.read_score_file(path)


def test_score_set_validation():
    with pytest.raises(ValidationError):
        mx.ScoreSet(np.array([]), np.array([0.1]))
    with pytest.raises(ValidationError):
        mx.ScoreSet(np.array([np.nan]), np.array([0.1]))


# ---------------------------------------------------------------------------
# tiny recognition embedder
# ---------------------------------------------------------------------------

def _manifest_scores(manifest, embedder, entries):
    labels = [e.identity_id for e in entries]
    feats = [embedder(read_volume(manifest.resolve(e, "volume"))) for e in entries]
    return mx.all_pairs_scores(labels, feats)


def test_tiny_embedder_requires_multiple_identities(small_manifest):
    single = [(0, np.zeros((8, 16, 16), np.float32)) for _ in range(3)]
    with pytest.raises(ValidationError):
        mx.tiny_embedder_train(single)


def test_tiny_embedder_beats_chance(small_manifest):
    train = [e for e in small_manifest.entries if e.impression_id < 2]
    held = [e for e in small_manifest.entries if e.impression_id == 2]
    pairs = [(e.identity_id, read_volume(small_manifest.resolve(e, "volume")).values)
             for e in train]
    cfg = mx.TinyEmbedderConfig(epochs=8, seed=0)
    emb = mx.tiny_embedder_train(pairs, cfg)
    emb2 = mx.tiny_embedder_train(pairs, cfg)
    vol = read_volume(small_manifest.resolve(held[0], "volume"))
    assert np.array_equal(emb(vol), emb2(vol))  # deterministic under fixed seed

    scores = _manifest_scores(small_manifest, emb, small_manifest.entries)
    assert mx.eer(scores) < 0.4

    untrained = mx.tiny_embedder_train(pairs, mx.TinyEmbedderConfig(epochs=0, seed=0))
    rand_eer = mx.eer(_manifest_scores(small_manifest, untrained,
                                       small_manifest.entries))
    assert abs(rand_eer - 0.5) < 0.25
