import numpy as np
import pytest

from lcmae import diffcore as dc
from lcmae import masking, objectives
from lcmae.diffcore import Tensor
from lcmae.nn import Linear
from lcmae.objectives import LossError, decomposition_residual, loss_cross, loss_in, loss_mae, total_loss
from lcmae.vit import MaskedAutoencoder, ModelConfig

LOSS_TOL = 1e-4


# ------------------------------------------------------------- oracles
def _std(x):
    return (x - x.mean()) / np.sqrt(x.var() + objectives.TARGET_EPS)


def mae_oracle(pred, x, m, normalize_target=True):
    total, count = 0.0, 0
    for i in range(len(m)):
        if m[i]:
            t = _std(x[i]) if normalize_target else x[i]
            total += sum((pred[i][k] - t[k]) ** 2 for k in range(len(t)))
            count += 1
    return total / (count * x.shape[1])


def _cos(a, b):
    return float(np.dot(a, b) / (np.sqrt(np.dot(a, a)) * np.sqrt(np.dot(b, b))))


def cross_oracle(v1, v2, m1, m2):
    vals = [1.0 - _cos(v1[i], v2[i]) for i in range(len(m1)) if m1[i] and m2[i]]
    return sum(vals) / max(1, len(vals))


def in_oracle(v, x, m):
    idx = [i for i in range(len(m)) if m[i]]
    total, pairs = 0.0, 0
    for i in idx:
        for j in idx:
            if i != j:
                total += abs(_cos(v[i], v[j]) - _cos(x[i], x[j]))
                pairs += 1
    return total / max(1, pairs)


# ------------------------------------------------------------- loss_mae
def test_mae_zero_when_perfect():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    m = np.array([1, 0, 1, 1, 0, 0], dtype=bool)
    assert float(loss_mae(objectives.standardize_patches(x), x, m).data) == 0.0
    assert float(loss_mae(x, x, m, normalize_target=False).data) == 0.0


def test_mae_empty_mask_errors():
    with pytest.raises(LossError):
        loss_mae(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(4, dtype=bool))


def test_mae_constant_offset():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 6))
    m = np.array([0, 0, 1, 0, 0], dtype=bool)
    assert float(loss_mae(x + 0.3, x, m, normalize_target=False).data) == pytest.approx(0.09, abs=1e-15)


@pytest.mark.parametrize("normalize", [True, False])
def test_mae_matches_oracle(normalize):
    rng = np.random.default_rng(2)
    for _ in range(10):
        x, pred = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        m = masking.sample_mask(8, 0.5, rng).bool
        got = float(loss_mae(pred, x, m, normalize_target=normalize).data)
        assert got == pytest.approx(mae_oracle(pred, x, m, normalize), abs=1e-12)


def test_mae_sum_reduction():
    rng = np.random.default_rng(3)
    x, pred = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    m = masking.sample_mask(8, 0.5, rng).bool
    s = float(loss_mae(pred, x, m, reduction="sum").data)
    assert s == pytest.approx(mae_oracle(pred, x, m) * 4 * 5, abs=1e-12)


def test_mae_normalize_pred_mode():
    rng = np.random.default_rng(4)
    x, pred = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    m = np.ones(6, dtype=bool)
    u = lambda a: a / np.linalg.norm(a, axis=-1, keepdims=True)  # noqa: E731
    expect = np.mean((u(pred) - u(x)) ** 2)
    got = float(loss_mae(pred, x, m, normalize_target=False, normalize_pred=True).data)
    assert got == pytest.approx(expect, abs=1e-14)


def test_prediction_error_consistency():
    rng = np.random.default_rng(5)
    x, pred = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    m = masking.sample_mask(8, 0.5, rng)
    errs = [objectives.prediction_error(pred, x, j, m) for j in np.flatnonzero(m.bool)]
    e2 = np.mean([np.sum(e ** 2) / 3 for e in errs])
    assert float(loss_mae(pred, x, m).data) == pytest.approx(e2, abs=1e-12)
    j = int(np.flatnonzero(m.bool)[0])
    np.testing.assert_allclose(objectives.prediction_error(pred, x, j, m), pred[j] - _std(x[j]), atol=1e-14)
    with pytest.raises(LossError):
        objectives.prediction_error(pred, x, int(np.flatnonzero(~m.bool)[0]), m)


def test_prediction_error_perfect():
    x = np.random.default_rng(6).normal(size=(4, 3))
    m = np.array([1, 0, 0, 1], dtype=bool)
    np.testing.assert_array_equal(objectives.prediction_error(x, x, 0, m, normalize_target=False), 0.0)


# ------------------------------------------------------------- projector
def test_projector_properties():
    rng = np.random.default_rng(0)
    p = Linear(4, 4, rng, np.float64)
    p.weight.data[...] = np.eye(4)
    p.bias.data[...] = 0.0
    t = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(objectives.project(t, p).data, t)
    p2 = Linear(4, 3, rng, np.float64)
    p2.bias.data[...] = rng.normal(size=3)
    a, b = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    f = lambda z: objectives.project(z, p2).data  # noqa: E731
    np.testing.assert_allclose(f(a + b) - f(b), f(a) - f(np.zeros_like(a)), atol=1e-14)
    p2.weight.data[...] = 0.0
    np.testing.assert_array_equal(f(a), np.broadcast_to(p2.bias.data, (2, 3)))
    with pytest.raises(LossError):
        objectives.project(rng.normal(size=(2, 5)), p2)


# ------------------------------------------------------------- loss_cross
def test_cross_examples():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, 3))
    m1 = np.array([1, 1, 0, 1], dtype=bool)
    m2 = np.array([1, 0, 1, 0], dtype=bool)
    assert float(loss_cross(v, v, m1, m2).data) == pytest.approx(0.0, abs=1e-15)
    w = v.copy()
    w[0] = -v[0]
    assert float(loss_cross(v, w, m1, m2).data) == pytest.approx(2.0, abs=1e-15)
    assert float(loss_cross(v, w, m1, ~m1).data) == 0.0


def test_cross_zero_norm_errors():
    v = np.ones((3, 2))
    w = v.copy()
    w[1] = 0.0
    m = np.ones(3, dtype=bool)
    with pytest.raises(LossError):
        loss_cross(v, w, m, m)
    # zero vector outside the intersection is fine
    loss_cross(v, w, m, np.array([1, 0, 1], dtype=bool))


def test_cross_matches_oracle_and_mse_form():
    rng = np.random.default_rng(1)
    for _ in range(10):
        v1, v2 = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
        m1, m2 = masking.sample_mask_pair(10, 0.6, rng)
        got = float(loss_cross(v1, v2, m1, m2).data)
        assert got == pytest.approx(cross_oracle(v1, v2, m1.bool, m2.bool), abs=1e-12)
        both = m1.bool & m2.bool
        u1 = v1 / np.linalg.norm(v1, axis=1, keepdims=True)
        u2 = v2 / np.linalg.norm(v2, axis=1, keepdims=True)
        mse = 0.5 * np.sum((u1 - u2) ** 2, axis=1)[both].sum() / max(1, both.sum())
        assert abs(got - mse) <= 1e-10


def test_cosine_mse_equivalence():
    rng = np.random.default_rng(2)
    u = rng.normal(size=(10_000, 8)) * rng.uniform(0.01, 100, size=(10_000, 1))
    v = rng.normal(size=(10_000, 8))
    cos = dc.cosine_similarity(Tensor(u), Tensor(v)).data
    uh = u / np.linalg.norm(u, axis=1, keepdims=True)
    vh = v / np.linalg.norm(v, axis=1, keepdims=True)
    assert np.max(np.abs((1 - cos) - 0.5 * np.sum((uh - vh) ** 2, axis=1))) <= 1e-10


# ------------------------------------------------------------- loss_in
def test_in_identity_projector_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    assert float(loss_in(x, x, np.ones(6, dtype=bool)).data) == pytest.approx(0.0, abs=1e-15)


def test_in_collapse_penalty():
    x = np.eye(4)
    v = np.ones((4, 3))
    assert float(loss_in(v, x, np.ones(4, dtype=bool)).data) == pytest.approx(1.0, abs=1e-15)


def test_in_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        v, x = rng.normal(size=(9, 5)), rng.normal(size=(9, 6))
        m = masking.sample_mask(9, 0.6, rng).bool
        assert float(loss_in(v, x, m).data) == pytest.approx(in_oracle(v, x, m), abs=1e-12)


def test_in_batched_unequal_counts_matches_oracle():
    rng = np.random.default_rng(2)
    v, x = rng.normal(size=(2, 7, 3)), rng.normal(size=(2, 7, 4))
    m = np.zeros((2, 7), dtype=bool)
    m[0, [0, 2, 5]] = True
    m[1, [1, 2, 3, 6]] = True
    total = sum(in_oracle(v[b], x[b], m[b]) * m[b].sum() * (m[b].sum() - 1) for b in range(2))
    expect = total / (3 * 2 + 4 * 3)
    assert float(loss_in(v, x, m).data) == pytest.approx(expect, abs=1e-12)


def test_in_range_per_pair():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v, x = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        val = float(loss_in(v, x, np.ones(6, dtype=bool)).data)
        assert 0.0 <= val <= 2.0


def test_in_zero_patch_errors():
    x = np.ones((3, 2))
    x[1] = 0.0
    with pytest.raises(LossError):
        loss_in(np.ones((3, 2)), x, np.ones(3, dtype=bool))


def test_losses_permutation_equivariant():
    rng = np.random.default_rng(4)
    x, pred = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    v1, v2 = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    m1, m2 = masking.sample_mask_pair(8, 0.5, rng)
    perm = rng.permutation(8)
    a, b = m1.bool, m2.bool
    assert float(loss_mae(pred, x, a).data) == pytest.approx(float(loss_mae(pred[perm], x[perm], a[perm]).data))
    assert float(loss_cross(v1, v2, a, b).data) == pytest.approx(
        float(loss_cross(v1[perm], v2[perm], a[perm], b[perm]).data))
    assert float(loss_in(v1, x, a).data) == pytest.approx(float(loss_in(v1[perm], x[perm], a[perm]).data))


# ------------------------------------------------------------- totals
def test_total_loss_flags():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 6, 4))
    views = [(rng.normal(size=(1, 6, 4)), rng.normal(size=(1, 6, 3)), masking.sample_mask(6, 0.5, rng))
             for _ in range(2)]
    b = total_loss("b", x, views)
    assert b.l_cross is None and b.l_in is None and b.l_mae is not None
    c = total_loss("(c)", x, views)
    assert c.l_mae is None and c.l_in is None and c.l_cross is not None
    a = total_loss("a", x, views)
    assert float(a.total.data) == float(a.l_mae.data) + float(a.l_cross.data) + float(a.l_in.data)
    assert a.as_dict()["total"] == float(a.total.data)
    with pytest.raises(LossError):
        total_loss((False, False, False), x, views)
    with pytest.raises(LossError):
        total_loss("c", x, views[:1])


# ------------------------------------------------------------- gradients
def _loss_cases(rng):
    x = rng.normal(size=(2, 6, 4))
    m1 = masking.sample_masks(2, 6, 0.5, rng)
    m2 = masking.sample_masks(2, 6, 0.5, rng) | m1  # guarantees an intersection
    return x, m1, m2


@pytest.mark.parametrize("which", ["mae", "mae_l2", "cross", "in", "in_std"])
def test_loss_gradcheck(which):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x, m1, m2 = _loss_cases(rng)
        if which == "mae":
            fn, inputs = (lambda p: loss_mae(p, x, m1)), [rng.normal(size=x.shape)]
        elif which == "mae_l2":
            fn, inputs = (lambda p: loss_mae(p, x, m1, normalize_target=False, normalize_pred=True)), \
                [rng.normal(size=x.shape)]
        elif which == "cross":
            fn, inputs = (lambda a, b: loss_cross(a, b, m1, m2)), [rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 3))]
        elif which == "in":
            fn, inputs = (lambda v: loss_in(v, x, m1)), [rng.normal(size=(2, 6, 3))]
        else:
            fn, inputs = (lambda v: loss_in(v, x, m1, standardize=True)), [rng.normal(size=(2, 6, 3))]
        worst = max(worst, dc.gradcheck(fn, inputs))
    assert worst <= LOSS_TOL


def test_lcmae_total_loss_toy_model_gradcheck():
    cfg = ModelConfig(img_size=8, patch=2, enc_depth=1, enc_dim=8, enc_heads=2, dec_depth=1, dec_dim=8,
                      dec_heads=2, proj_dim=4, dtype="float64")
    assert cfg.n == 16
    model = MaskedAutoencoder(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, cfg.n, cfg.patch_dim))
    m1 = masking.sample_masks(2, cfg.n, 0.5, masking.RngState(0, 0))
    m2 = masking.sample_masks(2, cfg.n, 0.5, masking.RngState(0, 1))

    def f(mask_token, proj_w):
        model.decoder.mask_token = mask_token
        model.projector.weight = proj_w
        out = model(np.concatenate([x, x]), np.concatenate([m1, m2]))
        v = model.project(out)
        views = [(out.pred[:2], v[:2], m1), (out.pred[2:], v[2:], m2)]
        return total_loss("a", x, views).total

    params = [model.encoder.patch_embed.bias, model.decoder.head.bias]
    err = dc.gradcheck(f, [model.decoder.mask_token.data, model.projector.weight.data], params=params)
    assert err <= LOSS_TOL


# ------------------------------------------------------------- identities
def test_decomposition_two_mask_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, pa, pb = rng.normal(size=(8, 5)), rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        ma = masking.sample_mask(8, 0.5, rng)
        mb = masking.Mask(ma.bits | masking.sample_mask(8, 0.5, rng).bits)
        j = int(np.flatnonzero(ma.bool & mb.bool)[0])
        assert decomposition_residual("two-mask", pa, x, j, ma, pb, mb) <= 1e-9


def test_decomposition_one_mask_random_and_degenerate():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, p = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        m = masking.sample_mask(8, 0.5, rng)
        i, j = np.flatnonzero(m.bool)[:2]
        assert decomposition_residual("one-mask", p, x, int(j), m, i=int(i)) <= 1e-9
        assert decomposition_residual("one-mask", p, x, int(i), m, i=int(i)) == 0.0


def test_decomposition_perfect_reconstruction():
    x = np.random.default_rng(2).normal(size=(4, 3))
    m = masking.Mask(np.array([1, 1, 0, 0]))
    assert decomposition_residual("two-mask", x, x, 0, m, x, m) == 0.0


def test_decomposition_errors():
    x = np.zeros((4, 3))
    m = masking.Mask(np.array([1, 0, 0, 0]))
    with pytest.raises(LossError):
        decomposition_residual("two-mask", x, x, 1, m, x, m)
    with pytest.raises(LossError):
        decomposition_residual("one-mask", x, x, 0, m, i=2)
    with pytest.raises(LossError):
        decomposition_residual("three-mask", x, x, 0, m)


def test_decomposition_on_model_outputs():
    cfg = ModelConfig(img_size=8, patch=2, enc_depth=1, enc_dim=8, enc_heads=2, dec_depth=1, dec_dim=8,
                      dec_heads=2, proj_dim=4, dtype="float64")
    model = MaskedAutoencoder(cfg, seed=3)
    x = np.random.default_rng(3).normal(size=(cfg.n, cfg.patch_dim))
    ma, mb = masking.sample_mask_pair(cfg.n, 0.75, masking.RngState(9))
    pa = model(x[None], ma).pred.data[0]
    pb = model(x[None], mb).pred.data[0]
    for j in np.flatnonzero(ma.bool & mb.bool):
        assert decomposition_residual("two-mask", pa, x, int(j), ma, pb, mb, normalize_target=True) <= 1e-9
