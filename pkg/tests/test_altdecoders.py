import dataclasses

import numpy as np
import pytest

from lcmae import altdecoders as ad
from lcmae import diffcore as dc
from lcmae import masking
from lcmae.objectives import loss_mae
from lcmae.vit import ModelConfig, MaskedAutoencoder, patchify

SMALL = ModelConfig(img_size=8, patch=2, enc_depth=1, enc_dim=8, enc_heads=2, dec_depth=1, dec_dim=8,
                    dec_heads=2, proj_dim=4, dtype="float64")


def test_gaussian_kernel_values():
    k = ad.gaussian_kernel(5, 1.0)
    assert k.weights.sum() == pytest.approx(1.0, abs=1e-15)
    raw = np.exp(-0.5 * np.array([[dy * dy + dx * dx for dx in range(-2, 3)] for dy in range(-2, 3)]))
    np.testing.assert_allclose(k.weights, raw / raw.sum(), atol=1e-15)
    np.testing.assert_array_equal(k.weights, k.weights.T)
    with pytest.raises(ValueError):
        ad.gaussian_kernel(4)
    with pytest.raises(ValueError):
        ad.gaussian_kernel(5, 0.0)


def test_averaging_matrix_oracle():
    k = ad.gaussian_kernel(3, 0.7)
    g = 4
    M = ad.averaging_matrix(g, k)
    np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-15)
    # interior cell carries the raw kernel
    q = 1 * g + 1
    np.testing.assert_allclose(M[q].reshape(g, g)[0:3, 0:3], k.weights, atol=1e-15)
    # corner: the surviving 2x2 block renormalized
    corner = k.weights[1:, 1:] / k.weights[1:, 1:].sum()
    np.testing.assert_allclose(M[0].reshape(g, g)[:2, :2], corner, atol=1e-15)
    assert M[0].reshape(g, g)[2:, :].sum() == 0.0


def test_weighted_average_constant_and_delta():
    k = ad.gaussian_kernel(5, 1.0)
    const = np.full((1, 16, 3), 2.0)
    np.testing.assert_allclose(ad.weighted_average(const, k).data, const, atol=1e-14)
    sharp = ad.gaussian_kernel(1, 1.0)
    x = np.random.default_rng(0).normal(size=(2, 16, 3))
    np.testing.assert_allclose(ad.weighted_average(x, sharp).data, x, atol=1e-15)


def test_weighted_average_far_tokens_irrelevant():
    k = ad.gaussian_kernel(3, 1.0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 36, 2))
    y = x.copy()
    y[0, 35] += 10.0  # cell (5, 5) is outside the 3x3 window of cell 0
    np.testing.assert_array_equal(ad.weighted_average(x, k).data[0, 0], ad.weighted_average(y, k).data[0, 0])


def test_weighted_avg_decode_mask_length():
    k = ad.gaussian_kernel(3, 1.0)
    with pytest.raises(ValueError):
        ad.weighted_avg_decode(np.zeros((1, 16, 2)), np.zeros(9, dtype=bool), k)


def test_conv_delta_kernel_identity():
    x = np.random.default_rng(0).normal(size=(2, 16, 4))
    w = ad.delta_kernel(4, 5)
    np.testing.assert_allclose(ad.conv_decode(x, w).data, x, atol=1e-15)


def test_conv_decode_matches_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 9, 2))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    got = ad.conv_decode(x, w, b).data
    grid = x[0].T.reshape(2, 3, 3)
    pad = np.pad(grid, ((0, 0), (1, 1), (1, 1)))
    expect = np.zeros((3, 3, 3))
    for o in range(3):
        for r in range(3):
            for c in range(3):
                expect[o, r, c] = np.sum(pad[:, r:r + 3, c:c + 3] * w[o]) + b[o]
    np.testing.assert_allclose(got[0], expect.reshape(3, 9).T, atol=1e-13)


def test_conv_decoder_gradcheck():
    rng_seeds = range(10)
    worst = 0.0
    for s in rng_seeds:
        rng = np.random.default_rng(s)
        x = rng.normal(size=(1, 16, 3))
        probe = rng.uniform(0.5, 1.5, size=(1, 16, 2))
        worst = max(worst, dc.gradcheck(lambda t, w, b: (ad.conv_decode(t, w, b) * probe).sum(),
                                        [x, rng.normal(size=(2, 3, 5, 5)), rng.normal(size=2)]))
    assert worst <= 1e-4


@pytest.mark.parametrize("variant", ["conv", "weighted_avg"])
def test_alt_decoders_in_model(variant):
    cfg = dataclasses.replace(SMALL, decoder=variant)
    model = MaskedAutoencoder(cfg, seed=0)
    x = np.random.default_rng(0).normal(size=(2, cfg.n, cfg.patch_dim))
    m = masking.sample_masks(2, cfg.n, 0.75, masking.RngState(0))
    out = model(x, m, capture=True)
    assert out.pred.shape == (2, cfg.n, cfg.patch_dim)
    assert out.dec_attn == []
    loss_mae(out.pred, x, m).backward()
    assert np.any(model.decoder.mask_token.grad)


# ----------------------------------------------------------- block targets
def _crop_oracle(img, block, patch):
    C, H, W = img.shape
    g = H // patch
    off = (patch - block) // 2
    tgt = np.zeros((g * g, block, block, C))
    valid = np.zeros((g * g, block, block, C), dtype=bool)
    for r in range(g):
        for c in range(g):
            for dy in range(block):
                for dx in range(block):
                    y, xx = r * patch + off + dy, c * patch + off + dx
                    if 0 <= y < H and 0 <= xx < W:
                        tgt[r * g + c, dy, dx] = img[:, y, xx]
                        valid[r * g + c, dy, dx] = True
    return tgt.reshape(g * g, -1), valid.reshape(g * g, -1)


@pytest.mark.parametrize("block", [2, 3, 4, 6, 7])
def test_block_targets_crop_oracle(block):
    img = np.random.default_rng(block).normal(size=(3, 8, 8))
    tgt, valid = ad.ae_block_targets(img, ad.BlockTargetSpec(block, 2))
    et, ev = _crop_oracle(img, block, 2)
    np.testing.assert_array_equal(valid, ev)
    np.testing.assert_array_equal(tgt, et)


def test_block_equal_patch_is_patchify():
    img = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    tgt, valid = ad.ae_block_targets(img, ad.BlockTargetSpec(4, 4))
    assert valid.all()
    np.testing.assert_array_equal(tgt[1], patchify(img[1], 4))


def test_block_spec_validation():
    with pytest.raises(ValueError):
        ad.BlockTargetSpec(1, 2)
    assert ad.desk_block_grid(32, 4) == [4, 8, 12, 28]


def test_normalize_block_targets_ignores_invalid():
    t = np.array([[1.0, 3.0, 99.0]])
    v = np.array([[True, True, False]])
    out = ad.normalize_block_targets(t, v)
    np.testing.assert_allclose(out, [[-1 / np.sqrt(1 + 1e-6), 1 / np.sqrt(1 + 1e-6), 0.0]], atol=1e-15)


def test_loss_ae_masks_invalid():
    pred = np.array([[1.0, 2.0, 3.0]])
    tgt = np.array([[0.0, 2.0, -50.0]])
    v = np.array([[True, True, False]])
    assert float(ad.loss_ae(pred, tgt, v).data) == pytest.approx(0.5)
    assert float(ad.loss_ae(pred, tgt).data) == pytest.approx((1 + 0 + 53 ** 2) / 3)
    with pytest.raises(ValueError):
        ad.loss_ae(pred, tgt[:, :2])


def test_ae_block_equal_patch_matches_mae_loss():
    cfg = dataclasses.replace(SMALL, decoder="ae_block", ae_block=SMALL.patch)
    model = MaskedAutoencoder(cfg, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        img = rng.normal(size=(2, 3, 8, 8))
        x = np.stack([patchify(im, cfg.patch) for im in img])
        none = np.zeros((2, cfg.n), dtype=bool)
        pred = model(x, none).pred
        tgt, valid = ad.ae_block_targets(img, ad.BlockTargetSpec(cfg.patch, cfg.patch))
        l_ae = float(ad.loss_ae(pred, ad.normalize_block_targets(tgt, valid), valid).data)
        l_mae = float(loss_mae(pred, x, np.ones((2, cfg.n), dtype=bool)).data)
        assert abs(l_ae - l_mae) <= 1e-10
