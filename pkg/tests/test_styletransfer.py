import math

import numpy as np
import pytest
import torch

from octfp import styletransfer as st
from octfp.tensorio import (BinaryImage2D, Image2D, ValidationError,
                            read_binary_image, read_image)


# ---------------------------------------------------------------------------
# AdaIN
# ---------------------------------------------------------------------------

def test_adain_identity_case(rng):
    x = torch.tensor(rng.standard_normal((3, 8, 8)), dtype=torch.float64)
    mu = x.mean(dim=(1, 2))
    std = torch.sqrt(x.var(dim=(1, 2), unbiased=False) + 1e-5)
    out = st.adain(x, mu, std, eps=1e-5)
    assert (out - x).abs().max().item() < 1e-5


def test_adain_standardizes_with_unit_targets(rng):
    x = torch.tensor(rng.standard_normal((2, 16, 16)), dtype=torch.float64)
    out = st.adain(x, torch.zeros(2), torch.ones(2))
    assert out.mean(dim=(1, 2)).abs().max().item() < 1e-12
    assert (out.var(dim=(1, 2), unbiased=False) - 1.0).abs().max().item() < 1e-4


def test_adain_hand_evaluated_example():
    # single channel [1, 2, 3, 4] as 1x2x2; population variance 1.25
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    out = st.adain(x, torch.tensor([10.0]), torch.tensor([2.0]), eps=1e-5)
    mu, var = 2.5, 1.25
    expect = 2.0 * (np.array([1.0, 2.0, 3.0, 4.0]) - mu) / math.sqrt(var + 1e-5) + 10.0
    assert np.abs(out.flatten().numpy() - expect).max() < 1e-12


def test_adain_statistics_match_targets(rng):
    for _ in range(20):
        c = int(rng.integers(1, 6))
        x = torch.tensor(rng.standard_normal((c, 24, 24)), dtype=torch.float32)
        mean = torch.tensor(rng.uniform(-3, 3, c), dtype=torch.float32)
        std = torch.tensor(rng.uniform(0.1, 3.0, c), dtype=torch.float32)
        out = st.adain(x, mean, std)
        got_mean = out.mean(dim=(1, 2))
        got_std = out.var(dim=(1, 2), unbiased=False).sqrt()
        assert (got_mean - mean).abs().max().item() < 1e-5
        assert (got_std - std).abs().max().item() < 1e-4


def test_adain_idempotent_under_own_stats(rng):
    x = torch.tensor(rng.standard_normal((2, 12, 12)), dtype=torch.float64)
    mean = torch.tensor([0.3, -0.7], dtype=torch.float64)
    std = torch.tensor([1.7, 0.4], dtype=torch.float64)
    once = st.adain(x, mean, std)
    twice = st.adain(once, mean, std)
    # the eps guard inside the normalization bounds the fixed-point error
    assert (once - twice).abs().max().item() < 1e-4


def test_adain_rejects_negative_std():
    x = torch.zeros(1, 4, 4)
    with pytest.raises(ValidationError):
        st.adain(x, torch.zeros(1), torch.tensor([-1.0]))


# ---------------------------------------------------------------------------
# Contrastive style loss
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("m", [1, 5, 15])
def test_csl_equal_similarities_closed_form(m):
    # positive and negatives identical => every similarity equal => ln(m+1)
    anchor = torch.tensor([1.0, 2.0, -1.0, 0.5], dtype=torch.float64)
    other = torch.tensor([0.3, -1.2, 0.7, 2.0], dtype=torch.float64)
    loss = st.csl_loss(anchor, other, [other] * m, temperature=0.07)
    assert abs(loss.item() - math.log(m + 1)) < 1e-6


def test_csl_extreme_separation_is_tiny():
    anchor = torch.tensor([1.0, 0.0], dtype=torch.float64)
    loss = st.csl_loss(anchor, anchor, [-anchor], temperature=0.07)
    expect = math.log1p(math.exp(-2.0 / 0.07))
    assert loss.item() > 0.0
    assert abs(loss.item() - expect) < 1e-12
    assert loss.item() < 1e-9


def test_csl_permutation_invariance(rng):
    anchor = torch.tensor(rng.standard_normal(8))
    pos = torch.tensor(rng.standard_normal(8))
    negs = [torch.tensor(rng.standard_normal(8)) for _ in range(6)]
    a = st.csl_loss(anchor, pos, negs)
    b = st.csl_loss(anchor, pos, negs[::-1])
    assert abs(a.item() - b.item()) < 1e-12


def test_csl_requires_negatives():
    v = torch.ones(4)
    with pytest.raises(ValidationError):
        st.csl_loss(v, v, [])


def test_csl_gradient_matches_central_differences(rng):
    anchor0 = rng.standard_normal(8)
    pos = torch.tensor(rng.standard_normal(8), dtype=torch.float64)
    negs = torch.tensor(rng.standard_normal((5, 8)), dtype=torch.float64)

    def f(arr):
        return st.csl_loss(torch.tensor(arr, dtype=torch.float64), pos, negs).item()

    x = torch.tensor(anchor0, dtype=torch.float64, requires_grad=True)
    st.csl_loss(x, pos, negs).backward()
    analytic = x.grad.numpy()
    h = 1e-6
    numeric = np.zeros(8)
    for i in range(8):
        xp, xm = anchor0.copy(), anchor0.copy()
        xp[i] += h
        xm[i] -= h
        numeric[i] = (f(xp) - f(xm)) / (2 * h)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic),
                                                   np.linalg.norm(numeric))
    assert rel < 1e-6


# ---------------------------------------------------------------------------
# exemplar pool
# ---------------------------------------------------------------------------

def test_pool_from_phantom_zmeans(small_manifest):
    zmeans = [read_image(small_manifest.resolve(e, "zmean"))
              for e in small_manifest.entries]
    pool = st.build_exemplar_pool(zmeans, min_per_category=8, seed=0)
    assert set(pool.categories) == {"upper", "middle", "lower", "full"}
    for cat, imgs in pool.categories.items():
        assert len(imgs) >= 8, cat
    assert len({(im.height, im.width) for im in pool.all_images()}) == 1


def test_pool_rejects_empty_category():
    img = Image2D(np.full((8, 8), 0.6, np.float32))
    with pytest.raises(ValidationError):
        st.ExemplarPool(categories={"upper": [img], "middle": [img],
                                    "lower": [img], "full": []})


# ---------------------------------------------------------------------------
# generator forward contracts
# ---------------------------------------------------------------------------

def _toy_inputs(rng, size=64):
    content = torch.tensor((rng.uniform(0, 1, (1, 1, size, size)) > 0.5)
                           .astype(np.float32))
    exemplar = torch.tensor(rng.uniform(0, 1, (1, 1, size, size))
                            .astype(np.float32))
    return content, exemplar


def test_generator_shape_range_and_determinism(rng):
    gen = st.StyleTransferGenerator(code_dim=32, base=8).eval()
    content, exemplar = _toy_inputs(rng)
    with torch.no_grad():
        a = gen(content, exemplar)
        b = gen(content, exemplar)
    assert a.shape == content.shape
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()


def test_generator_resolution_mismatch(rng):
    gen = st.StyleTransferGenerator(code_dim=32, base=8).eval()
    content, _ = _toy_inputs(rng, 64)
    _, exemplar = _toy_inputs(rng, 32)
    with pytest.raises(ValidationError):
        gen(content, exemplar)


def test_style_encode_blank_image_finite():
    gen = st.StyleTransferGenerator(code_dim=32, base=8)
    code = st.style_encode(gen, Image2D(np.zeros((64, 64), np.float32)))
    assert np.all(np.isfinite(code))
    code2 = st.style_encode(gen, Image2D(np.zeros((64, 64), np.float32)))
    assert np.array_equal(code, code2)


# ---------------------------------------------------------------------------
# smoke training
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def style_smoke(tmp_path_factory):
    from octfp import phantom as ph
    out = tmp_path_factory.mktemp("style_phantoms")
    manifest = ph.build_phantom_dataset(17, 4, ph.PhantomParams(),
                                        master_seed=555, out_dir=out,
                                        size=(64, 64))
    pairs = [(read_binary_image(manifest.resolve(e, "print")),
              read_image(manifest.resolve(e, "zmean")))
             for e in manifest.entries]
    zmeans = [p[1] for p in pairs]
    pool = st.build_exemplar_pool(zmeans, seed=0)
    cfg = st.StyleStageConfig(epochs=5, batch_size=8, seed=0)
    ckpt = st.train_style_stage(pairs[:64], pool, cfg)
    return pairs, pool, ckpt


def test_style_training_losses(style_smoke):
    pairs, pool, ckpt = style_smoke
    assert len(ckpt.history) == 5
    assert ckpt.history[-1]["loss_g"] < ckpt.history[0]["loss_g"]
    # contrastive component starts near ln(m+1) with an untrained encoder
    m = min(ckpt.config.num_negatives, len(pool.all_images()) - 1)
    assert abs(ckpt.history[0]["csl"] - math.log(m + 1)) < 0.5


def test_style_checkpoint_roundtrip(style_smoke, tmp_path):
    pairs, pool, ckpt = style_smoke
    path = tmp_path / "style.pt"
    ckpt.save(path)
    back = st.StyleCheckpoint.load(path)
    i_m, _ = pairs[-1]
    exemplar = pool.categories["middle"][0]
    a = st.style_generator_forward(ckpt, i_m, exemplar)
    b = st.style_generator_forward(back, i_m, exemplar)
    assert np.array_equal(a.values, b.values)


def test_style_output_beats_binary_input(style_smoke):
    from octfp.metrics import ssim
    pairs, pool, ckpt = style_smoke
    held = pairs[64:68]
    for i_m, gt in held:
        cat = st.print_content_category(i_m)
        out = st.style_generator_forward(ckpt, i_m, pool.categories[cat][0])
        assert ssim(out, gt) > ssim(i_m.to_image(), gt)


def test_trained_encoder_prefers_structured_images(style_smoke, rng):
    pairs, pool, ckpt = style_smoke
    gen = ckpt.build_generator()
    a = pairs[64][1]
    b = pairs[65][1]
    shuffled = a.values.copy().ravel()
    rng.shuffle(shuffled)
    shuffled = Image2D(shuffled.reshape(a.values.shape))
    ca = st.style_encode(gen, a)
    cb = st.style_encode(gen, b)
    cs = st.style_encode(gen, shuffled)

    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + 1e-12))

    assert cos(ca, cb) > cos(ca, cs)
