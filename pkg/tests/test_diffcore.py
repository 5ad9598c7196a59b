import numpy as np
import pytest

from lcmae import diffcore as dc
from lcmae.diffcore import Tensor

SEEDS = range(10)
PRIM_TOL = 1e-5


def _signed(rng, shape, lo=0.5, hi=1.5):
    # weights bounded away from zero keep every coordinate's gradient well scaled
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _probe(rng, shape):
    return Tensor(_signed(rng, shape))


def _check(fn, inputs, tol=PRIM_TOL):
    err = dc.gradcheck(fn, inputs)
    assert err <= tol, err
    return err


# ------------------------------------------------------------ primitives
# each case: (name, build(rng) -> (fn, inputs))
def _unary(op, make=lambda rng: rng.normal(size=(3, 4))):
    def build(rng):
        x = make(rng)
        w = _probe(rng, x.shape)
        return (lambda a: (op(a) * w).sum()), [x]
    return build


def _binary(op, sa=(3, 4), sb=(3, 4), make_b=None):
    def build(rng):
        a = rng.normal(size=sa)
        b = make_b(rng, sb) if make_b else rng.normal(size=sb)
        out_shape = np.broadcast_shapes(sa, sb)
        w = _probe(rng, out_shape)
        return (lambda x, y: (op(x, y) * w).sum()), [a, b]
    return build


def _build_matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w = _probe(rng, (2, 3, 5))
    return (lambda x, y: ((x @ y) * w).sum()), [a, b]


def _build_matmul_batched(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))
    w = _probe(rng, (2, 3, 2))
    return (lambda x, y: ((x @ y) * w).sum()), [a, b]


def _build_sum_axis(rng):
    x = rng.normal(size=(3, 4, 2))
    w = _probe(rng, (3, 2))
    return (lambda a: (dc.sum_(a, axis=1) * w).sum()), [x]


def _build_mean_axis(rng):
    x = rng.normal(size=(3, 4, 2))
    w = _probe(rng, (3, 1, 2))
    return (lambda a: (dc.mean(a, axis=1, keepdims=True) * w).sum()), [x]


def _build_reshape(rng):
    x = rng.normal(size=(3, 4))
    w = _probe(rng, (2, 6))
    return (lambda a: (a.reshape(2, 6) * w).sum()), [x]


def _build_transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    w = _probe(rng, (4, 2, 3))
    return (lambda a: (dc.transpose(a, (2, 0, 1)) * w).sum()), [x]


def _build_concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    w = _probe(rng, (2, 5))
    return (lambda x, y: (dc.concat([x, y], axis=1) * w).sum()), [a, b]


def _build_getitem(rng):
    x = rng.normal(size=(4, 5))
    w = _probe(rng, (2, 5))
    return (lambda a: (a[1:3] * w).sum()), [x]


def _build_gather(rng):
    x = rng.normal(size=(2, 6, 3))
    idx = np.stack([rng.permutation(6)[:4] for _ in range(2)])
    w = _probe(rng, (2, 4, 3))
    return (lambda a: (dc.gather(a, idx, axis=1) * w).sum()), [x]


def _build_scatter(rng):
    base = rng.normal(size=(2, 6, 3))
    src = rng.normal(size=(2, 4, 3))
    idx = np.stack([rng.permutation(6)[:4] for _ in range(2)])
    w = _probe(rng, (2, 6, 3))
    return (lambda b, s: (dc.scatter(b, idx, s, axis=1) * w).sum()), [base, src]


def _build_softmax(rng):
    x = rng.normal(size=(3, 5))
    w = _probe(rng, (3, 5))
    return (lambda a: (dc.softmax(a, axis=-1) * w).sum()), [x]


def _build_log_softmax(rng):
    x = rng.normal(size=(3, 5))
    w = _probe(rng, (3, 5))
    return (lambda a: (dc.log_softmax(a, axis=-1) * w).sum()), [x]


def _build_layer_norm(rng):
    x = rng.normal(size=(3, 6))
    w = _probe(rng, (3, 6))
    return (lambda a: (dc.layer_norm(a) * w).sum()), [x]


def _build_l2norm(rng):
    x = rng.normal(size=(3, 4))
    w = _probe(rng, (3,))
    return (lambda a: (dc.l2norm(a, axis=-1) * w).sum()), [x]


def _build_cosine(rng):
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    w = _probe(rng, (4,))
    return (lambda x, y: (dc.cosine_similarity(x, y) * w).sum()), [a, b]


def _build_conv2d(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    w = _probe(rng, (1, 3, 4, 4))
    return (lambda a, kk, bb: (dc.conv2d(a, kk, bb) * w).sum()), [x, k, b]


def _positive(rng, shape=(3, 4)):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape=(3, 4)):
    return _signed(rng, shape, 0.2, 2.0)


PRIMITIVES = {
    "add": _binary(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _binary(lambda a, b: a - b, (3, 4), (3, 1)),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, make_b=_positive),
    "scalar": _unary(lambda a: 2.5 * a - 1.0 + a / 4.0),
    "power": _unary(lambda a: dc.power(a, 3.0), make=_away_from_zero),
    "power_frac": _unary(lambda a: dc.power(a, 1.5), make=_positive),
    "exp": _unary(dc.exp),
    "log": _unary(dc.log, make=_positive),
    "sqrt": _unary(dc.sqrt, make=_positive),
    "abs": _unary(dc.abs_, make=_away_from_zero),
    "gelu": _unary(dc.gelu),
    "sum": _build_sum_axis,
    "mean": _build_mean_axis,
    "matmul": _build_matmul,
    "matmul_batched": _build_matmul_batched,
    "reshape": _build_reshape,
    "transpose": _build_transpose,
    "concat": _build_concat,
    "getitem": _build_getitem,
    "gather": _build_gather,
    "scatter": _build_scatter,
    "softmax": _build_softmax,
    "log_softmax": _build_log_softmax,
    "layer_norm": _build_layer_norm,
    "l2norm": _build_l2norm,
    "cosine": _build_cosine,
    "conv2d": _build_conv2d,
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(name):
    worst = 0.0
    for seed in SEEDS:
        fn, inputs = PRIMITIVES[name](np.random.default_rng(seed))
        worst = max(worst, _check(fn, inputs))
    assert worst <= PRIM_TOL


# ------------------------------------------------------------ examples
def test_matmul_identity():
    M = np.array([[3.0, 1.0], [4.0, 1.0]])
    out = dc.matmul(Tensor(np.eye(2)), Tensor(M))
    np.testing.assert_array_equal(out.data, M)


def test_softmax_uniform():
    np.testing.assert_allclose(dc.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))


def test_softmax_large_logits_stable():
    out = dc.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0])))
    np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0])


def test_layernorm_constant_is_zero():
    out = dc.layer_norm(Tensor(np.full((2, 5), 3.7)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_cosine_gradient_vanishes_at_alignment():
    u = np.array([0.6, 0.8, 0.0])
    x = Tensor(u.copy(), requires_grad=True)
    (1.0 - dc.cosine_similarity(x, Tensor(u.copy()))).backward()
    np.testing.assert_allclose(x.grad, np.zeros(3), atol=1e-15)


def test_softmax_cross_composite():
    rng = np.random.default_rng(3)
    y = np.array([2, 0, 1])

    def f(logits):
        return -dc.log_softmax(logits, axis=-1)[np.arange(3), y].mean()

    assert dc.gradcheck(f, [rng.normal(size=(3, 4))]) <= 1e-5


def test_linear_layer_gradcheck():
    rng = np.random.default_rng(0)
    w = _probe(rng, (2, 3))

    def f(x, W, b):
        return ((x @ W + b) * w).sum()

    assert dc.gradcheck(f, {"x": rng.normal(size=(2, 4)), "W": rng.normal(size=(4, 3)),
                            "b": rng.normal(size=(3,))}) <= 1e-6


def test_constant_function_gradcheck_zero():
    assert dc.gradcheck(lambda x: dc.mul(x.sum(), 0.0) + 4.0, [np.ones(3)]) == 0.0


def test_gradcheck_checks_closed_over_params():
    rng = np.random.default_rng(1)
    W = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    assert dc.gradcheck(lambda x: ((x @ W) ** 2).sum(), [rng.normal(size=(2, 3))], params=[W]) <= 1e-6


def test_gradcheck_rejects_non_scalar():
    with pytest.raises(dc.ShapeError):
        dc.gradcheck(lambda x: x * 2.0, [np.ones(3)])


def test_matmul_shape_error_names_node():
    with pytest.raises(dc.ShapeError) as ei:
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "matmul" in str(ei.value)


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_nonfinite_intermediate_raises():
    with dc.check_finite():
        with pytest.raises(dc.NonFiniteError) as ei:
            dc.log(Tensor(np.array([0.0, 1.0])))
    assert "log" in str(ei.value)


def test_graph_evaluate_and_backward():
    W = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    U = Tensor(np.ones(2), requires_grad=True)  # not used: detached

    def fn(x):
        return {"output": (x @ W).sum(), "hidden": x @ W}

    g = dc.Graph(fn, {"W": W, "U": U})
    x = np.array([[1.0, 1.0]])
    out1 = dc.evaluate(g, {"x": x})
    out2 = dc.evaluate(g, {"x": x})
    np.testing.assert_array_equal(out1["hidden"], [[4.0, 6.0]])
    assert out1["output"] == out2["output"] == 10.0
    grads = dc.backward(g, {"x": x})
    np.testing.assert_array_equal(grads["W"], [[1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_array_equal(grads["U"], np.zeros(2))
    np.testing.assert_array_equal(grads["x"], [[3.0, 7.0]])


def test_backward_non_scalar_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(dc.GraphError):
        (x * 2.0).backward()


def test_gather_scatter_reconstructs():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 3))
    idx = np.stack([np.sort(rng.permutation(6)[:4]) for _ in range(2)])
    g = dc.gather(Tensor(x), idx, axis=1)
    back = dc.scatter(Tensor(np.zeros_like(x)), idx, g, axis=1)
    keep = np.zeros((2, 6), dtype=bool)
    np.put_along_axis(keep, idx, True, axis=1)
    expect = np.where(keep[..., None], x, 0.0)
    np.testing.assert_array_equal(back.data, expect)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with dc.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_broadcast_gradient_reduces_to_input_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    y = dc.gelu(dc.layer_norm(x) * 2.0).sum()
    y.backward()
    assert y.dtype == np.float32 and x.grad.dtype == np.float32


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    out = dc.conv2d(Tensor(x), Tensor(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for b in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(5):
                    ref[b, o, i, j] = np.sum(xp[b, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_rejects_even_kernel():
    with pytest.raises(dc.ShapeError):
        dc.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))
