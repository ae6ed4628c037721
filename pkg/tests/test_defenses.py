import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from apforge.defenses import (
    DefenseConfig,
    bit_depth_reduce,
    gaussian_blur,
    grayscale,
    jpeg_cycle,
    pgd_adversarial,
    preprocess,
    psnr,
    quant_table,
    JPEG_LUMA,
    umax_select,
)
from apforge.augment import ulite
from apforge.numerics import init_model, per_sample_loss
from apforge.oracles import blur_oracle

images = hnp.arrays(np.float32, st.tuples(st.integers(1, 3), st.just(3), st.integers(1, 12), st.integers(1, 12)),
                    elements=st.floats(0, 1, width=32))


def rand_batch(n=4, hw=16, seed=0):
    return np.random.default_rng(seed).random((n, 3, hw, hw)).astype(np.float32)


def test_config_defaults_and_json():
    cfg = DefenseConfig("JPEG", seed=3)
    assert (cfg.jpeg_quality, cfg.bdr_bits, cfg.gauss_kernel, cfg.gauss_sigma) == (10, 2, 3, 0.1)
    assert (cfg.at_steps, cfg.umax_k, cfg.aug_prob) == (10, 5, 0.5)
    assert DefenseConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize("kw", [dict(kind="Nope"), dict(jpeg_quality=0), dict(jpeg_quality=101),
                                dict(bdr_bits=0), dict(bdr_bits=8), dict(umax_k=0), dict(at_steps=0),
                                dict(gauss_kernel=4)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        DefenseConfig(**kw)


def test_grayscale_examples():
    x = np.full((1, 3, 2, 2), 0.37, np.float32)
    assert np.array_equal(grayscale(x), x)
    red = np.zeros((1, 3, 1, 1), np.float32)
    red[0, 0] = 1
    assert np.array_equal(grayscale(red), np.full((1, 3, 1, 1), np.float32(0.299)))
    with pytest.raises(ValueError):
        grayscale(np.zeros((1, 1, 2, 2)))


def test_bdr_examples():
    assert bit_depth_reduce(np.array([0.6]), 1)[0] == 1.0
    x = rand_batch()
    vals = set(np.unique(bit_depth_reduce(x, 2)).tolist())
    assert vals <= set(np.float32([0, 1 / 3, 2 / 3, 1]).tolist())
    for b in (0, 8):
        with pytest.raises(ValueError):
            bit_depth_reduce(x, b)


def test_blur_examples():
    x = rand_batch(2, 9)
    assert np.array_equal(gaussian_blur(x, 1, 0.7), x)
    c = np.full((1, 3, 7, 7), 0.42, np.float32)
    assert np.allclose(gaussian_blur(c, 5, 1.5), c, atol=1e-7)
    with pytest.raises(ValueError):
        gaussian_blur(x, 4, 1.0)


@pytest.mark.parametrize("k,sigma", [(3, 0.1), (3, 1.0), (5, 0.8), (7, 2.0)])
def test_blur_matches_direct_convolution(k, sigma):
    x = rand_batch(2, 11, seed=k)
    assert np.abs(gaussian_blur(x, k, sigma) - blur_oracle(x, k, sigma)).max() <= 1e-6


def test_quant_table_scaling():
    assert np.array_equal(quant_table(JPEG_LUMA, 50), JPEG_LUMA)
    assert quant_table(JPEG_LUMA, 100).max() == 1
    assert quant_table(JPEG_LUMA, 10)[0, 0] == 80  # (16 * 500 + 50) // 100
    with pytest.raises(ValueError):
        quant_table(JPEG_LUMA, 0)


def test_jpeg_quality_100_psnr():
    x = rand_batch(4, 32)
    assert psnr(jpeg_cycle(x, 100), x) >= 35


def test_jpeg_quality_monotone():
    x = rand_batch(4, 32, seed=2)
    assert psnr(jpeg_cycle(x, 10), x) < psnr(jpeg_cycle(x, 50), x)


@pytest.mark.parametrize("c", [0.0, 0.3, 0.5, 0.77, 1.0])
@pytest.mark.parametrize("q", [50, 75, 100])
def test_jpeg_constant_image(c, q):
    x = np.full((1, 3, 16, 16), c, np.float32)
    assert np.abs(jpeg_cycle(x, q) - x).max() <= 1 / 255 + 1e-6


def test_jpeg_pads_odd_sizes():
    x = rand_batch(2, 16)[:, :, :13, :10]
    out = jpeg_cycle(x, 75)
    assert out.shape == x.shape
    assert psnr(out, x) > 20


def test_jpeg_twice_near_idempotent():
    x = rand_batch(4, 32, seed=5)
    once = jpeg_cycle(x, 10)
    assert abs(psnr(jpeg_cycle(once, 10), x) - psnr(once, x)) < 1


def test_jpeg_quality_range():
    with pytest.raises(ValueError):
        jpeg_cycle(rand_batch(), 0)


@settings(max_examples=40, deadline=None)
@given(images)
def test_preprocessing_range_shape_idempotence(x):
    g = grayscale(x)
    assert np.array_equal(grayscale(g), g)
    b = bit_depth_reduce(x, 3)
    assert np.array_equal(bit_depth_reduce(b, 3), b)
    for out in (g, b, jpeg_cycle(x, 30), gaussian_blur(x, 3, 1.0) if min(x.shape[-2:]) > 1 else x):
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1


def test_preprocess_routing():
    x = rand_batch()
    assert np.array_equal(preprocess(x, DefenseConfig("Gray")), grayscale(x))
    assert np.array_equal(preprocess(x, DefenseConfig("BDR", bdr_bits=3)), bit_depth_reduce(x, 3))
    assert np.array_equal(preprocess(x, DefenseConfig("MixUp")), x)


TINY = dict(num_classes=3, in_shape=(3, 8, 8), widths=(4, 8, 8))


def test_pgd_adversarial():
    m = init_model(**TINY, seed=1)
    x = rand_batch(6, 8)
    y = np.array([0, 1, 2, 0, 1, 2])
    start = pgd_adversarial(m, x, y, 8 / 255, 2 / 255, 0, np.random.default_rng(0))
    assert np.abs(start - x).max() <= 8 / 255 + 1e-7
    adv = pgd_adversarial(m, x, y, 8 / 255, 2 / 255, 5, np.random.default_rng(0))
    assert np.abs(adv - x).max() <= 8 / 255 + 1e-7
    assert adv.min() >= 0 and adv.max() <= 1
    assert per_sample_loss(m, adv, y).mean() >= per_sample_loss(m, x, y).mean() - 1e-6
    with pytest.raises(ValueError):
        pgd_adversarial(m, x, y, 0, 1 / 255, 1, np.random.default_rng(0))


def test_umax_selects_max_loss():
    m = init_model(**TINY, seed=2)
    x, y = rand_batch(8, 8), np.arange(8) % 3
    out, soft, losses = umax_select(m, x, y, 5, np.random.default_rng(3), return_losses=True)
    assert losses.shape == (5, 8)
    chosen = per_sample_loss(m, out, y)
    assert np.allclose(chosen, losses.max(axis=0), rtol=1e-6)
    assert np.allclose(soft.sum(axis=1), 1)


def test_umax_k1_is_single_ulite_draw():
    m = init_model(**TINY, seed=2)
    x, y = rand_batch(8, 8), np.arange(8) % 3
    out, _ = umax_select(m, x, y, 1, np.random.default_rng(7))
    assert np.array_equal(out, ulite(x, np.random.default_rng(7)))


def test_umax_deterministic():
    m = init_model(**TINY, seed=2)
    x, y = rand_batch(8, 8), np.arange(8) % 3
    a, _ = umax_select(m, x, y, 3, np.random.default_rng(9))
    b, _ = umax_select(m, x, y, 3, np.random.default_rng(9))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        umax_select(m, x, y, 0, np.random.default_rng(9))
