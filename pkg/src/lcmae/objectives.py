"""Reconstruction and patch-level contrastive losses.

All losses take predictions / projected tokens as :class:`~lcmae.diffcore.Tensor`
of shape (B, n, d) (a bare (n, d) is treated as B=1) and boolean masks of
shape (B, n). By default each loss is divided by the number of contributing
terms (masked patches, intersecting positions, masked pairs); pass
``reduction="sum"`` for the plain sums.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import masking
from .diffcore import Tensor

TARGET_EPS = 1e-6

# Which of (reconstruction, cross-view, in-view) each ablation setting uses.
SETTINGS = {
    "a": (True, True, True),
    "b": (True, False, False),
    "c": (False, True, False),
    "d": (False, False, True),
    "e": (True, True, False),
    "f": (True, False, True),
    "g": (False, True, True),
}


class LossError(ValueError):
    pass


def _batched(t) -> Tensor:
    t = dc.as_tensor(t)
    return t.reshape(1, *t.shape) if t.ndim == 2 else t


def _bits(mask, batch: int) -> np.ndarray:
    return masking.as_batch(mask, batch)


def standardize_patches(x: np.ndarray) -> np.ndarray:
    """Per-patch zero mean / unit variance (population variance, eps inside sqrt)."""
    x = np.asarray(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + TARGET_EPS)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def make_target(x: np.ndarray, normalize_target: bool = True, normalize_pred: bool = False) -> np.ndarray:
    t = standardize_patches(x) if normalize_target else np.asarray(x)
    if normalize_pred:
        t = _unit(t)
    return t


def loss_mae(pred, x, m, normalize_target: bool = True, normalize_pred: bool = False,
             reduction: str = "mean") -> Tensor:
    """Squared error on masked patches only.

    ``normalize_pred`` l2-normalizes both prediction and target per patch
    (alternative to per-patch target standardization).
    """
    pred = _batched(pred)
    x = np.asarray(x)
    x = x[None] if x.ndim == 2 else x
    if pred.shape != x.shape:
        raise LossError(f"prediction {pred.shape} and patches {x.shape} disagree")
    bits = _bits(m, pred.shape[0])
    count = int(bits.sum())
    if count == 0:
        raise LossError("reconstruction loss is undefined for an empty mask")
    target = make_target(x, normalize_target, normalize_pred).astype(pred.dtype)
    if normalize_pred:
        pred = pred / dc.l2norm(pred, axis=-1, keepdims=True)
    diff = pred - target
    per_patch = (diff * diff).sum(axis=-1)
    total = (per_patch * bits.astype(pred.dtype)).sum()
    if reduction == "sum":
        return total
    return total / float(count * pred.shape[-1])


def prediction_error(pred, x, j: int, m, normalize_target: bool = True, normalize_pred: bool = False) -> np.ndarray:
    """Residual between the output at masked position ``j`` and its target (one image)."""
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    bits = masking.as_batch(m)[0]
    if not bits[j]:
        raise LossError(f"position {j} is not masked")
    target = make_target(np.asarray(x), normalize_target, normalize_pred)
    out = pred[j]
    if normalize_pred:
        out = _unit(out)
    return out - target[j]


def project(tokens, projector) -> Tensor:
    """Apply the affine projector to decoder tokens."""
    tokens = dc.as_tensor(tokens)
    if tokens.shape[-1] != projector.d_in:
        raise LossError(f"projector expects dim {projector.d_in}, got {tokens.shape[-1]}")
    return projector(tokens)


def _check_norms(v: np.ndarray, where: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(v, axis=-1)
    if np.any(norms[where] == 0):
        raise LossError(f"zero-norm {what} at a contributing position; cosine is undefined")


def loss_cross(v1, v2, m1, m2, reduction: str = "mean") -> Tensor:
    """1 - cos between the two views at positions masked in both."""
    v1, v2 = _batched(v1), _batched(v2)
    if v1.shape != v2.shape:
        raise LossError(f"view shapes differ: {v1.shape} vs {v2.shape}")
    B, n, d = v1.shape
    both = _bits(m1, B) & _bits(m2, B)
    if both.shape[1] != n:
        raise LossError(f"mask length {both.shape[1]} != {n}")
    _check_norms(v1.data, both, "view-1 vector")
    _check_norms(v2.data, both, "view-2 vector")
    idx = np.flatnonzero(both)
    if idx.size == 0:
        return dc.mul(v1.sum(), 0.0)
    a = v1.reshape(B * n, d)[idx]
    b = v2.reshape(B * n, d)[idx]
    total = (1.0 - dc.cosine_similarity(a, b)).sum()
    if reduction == "sum":
        return total
    return total / float(max(1, idx.size))


def _cos_matrix(u: Tensor) -> Tensor:
    un = u / dc.l2norm(u, axis=-1, keepdims=True)
    return un @ dc.swapaxes(un, -1, -2)


def loss_in(v, x, m, standardize: bool = False, reduction: str = "mean") -> Tensor:
    """L1 gap between token and patch cosine-similarity matrices over masked pairs (i != j)."""
    v = _batched(v)
    x = np.asarray(x)
    x = x[None] if x.ndim == 2 else x
    B, n, _ = v.shape
    if x.shape[:2] != (B, n):
        raise LossError(f"patches {x.shape} do not match tokens {v.shape}")
    bits = _bits(m, B)
    xs = standardize_patches(x) if standardize else x
    _check_norms(v.data, bits, "token vector")
    _check_norms(xs, bits, "image patch")
    counts = bits.sum(axis=1)
    pairs = int((counts * (counts - 1)).sum())
    if counts.max() == 0:
        return dc.mul(v.sum(), 0.0)
    if np.all(counts == counts[0]):
        groups = [(np.arange(B), bits)]
    else:
        groups = [(np.array([b]), bits[b:b + 1]) for b in range(B) if counts[b] > 0]
    total = None
    for rows, gbits in groups:
        k = int(gbits[0].sum())
        keep = np.nonzero(gbits)[1].reshape(len(rows), k)
        vr = v if len(rows) == B else v[rows]
        vm = dc.gather(vr, keep, axis=1)
        xm = np.take_along_axis(xs[rows], keep[..., None], axis=1)
        cx = np.einsum("bid,bjd->bij", _unit(xm), _unit(xm)).astype(v.dtype)
        off = (1.0 - np.eye(k, dtype=v.dtype))
        part = (dc.abs_(_cos_matrix(vm) - cx) * off).sum()
        total = part if total is None else total + part
    if reduction == "sum":
        return total
    return total / float(max(1, pairs))


@dataclass
class LossBreakdown:
    """Enabled terms are tensors; disabled ones are ``None`` (absent, not zero)."""

    l_mae: Tensor | None
    l_cross: Tensor | None
    l_in: Tensor | None
    total: Tensor

    def as_dict(self) -> dict[str, float | None]:
        f = lambda t: None if t is None else float(t.data)  # noqa: E731
        return {"l_mae": f(self.l_mae), "l_cross": f(self.l_cross), "l_in": f(self.l_in), "total": f(self.total)}


def parse_flags(flags) -> tuple[bool, bool, bool]:
    if isinstance(flags, str):
        key = flags.strip("()").lower()
        if key not in SETTINGS:
            raise LossError(f"unknown loss setting {flags!r}")
        return SETTINGS[key]
    if isinstance(flags, dict):
        return bool(flags.get("mae")), bool(flags.get("cross")), bool(flags.get("in"))
    return tuple(bool(f) for f in flags)


def total_loss(flags, x, views, weights=(1.0, 1.0, 1.0), normalize_target: bool = True,
               normalize_pred: bool = False, in_standardize: bool = False,
               reduction: str = "mean") -> LossBreakdown:
    """Sum of the enabled loss terms.

    ``views`` is a list of ``(pred, v, mask)`` triples for the same images;
    the cross-view term needs two. Reconstruction and in-view terms are
    averaged over views.
    """
    use_mae, use_cross, use_in = parse_flags(flags)
    if not (use_mae or use_cross or use_in):
        raise LossError("at least one loss term must be enabled")
    if use_cross and len(views) < 2:
        raise LossError("the cross-view loss needs two masked views")
    l_mae = l_cross = l_in = None
    if use_mae:
        terms = [loss_mae(p, x, m, normalize_target, normalize_pred, reduction) for p, _, m in views]
        l_mae = _avg(terms)
    if use_cross:
        (_, v1, m1), (_, v2, m2) = views[0], views[1]
        l_cross = loss_cross(v1, v2, m1, m2, reduction)
    if use_in:
        l_in = _avg([loss_in(v, x, m, in_standardize, reduction) for _, v, m in views])
    total = None
    for w, t in zip(weights, (l_mae, l_cross, l_in)):
        if t is None:
            continue
        term = t if w == 1.0 else t * w
        total = term if total is None else total + term
    return LossBreakdown(l_mae, l_cross, l_in, total)


def _avg(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out if len(terms) == 1 else out / float(len(terms))


def decomposition_residual(kind: str, pred_a, x, j: int, m_a, pred_b=None, m_b=None, i: int | None = None,
                           normalize_target: bool = False) -> float:
    """|LHS - RHS| of the patch-level rewrites of the reconstruction term.

    ``two-mask``: ||h(x,m_a)_j - x_j||^2 vs ||(h(x,m_a)_j - h(x,m_b)_j) + e(j|m_b)||^2.
    ``one-mask``: ||h(x,m)_i - x_i||^2 vs ||[(h_i - h_j) - (x_i - x_j)] + e(j|m)||^2.
    """
    get = lambda p: p.data if isinstance(p, Tensor) else np.asarray(p)  # noqa: E731
    pa = get(pred_a)
    target = make_target(np.asarray(x), normalize_target)
    if kind == "two-mask":
        bits_a = masking.as_batch(m_a)[0]
        if not bits_a[j]:
            raise LossError(f"position {j} is not masked in m_a")
        e_b = prediction_error(pred_b, x, j, m_b, normalize_target)
        pb = get(pred_b)
        lhs = np.sum((pa[j] - target[j]) ** 2)
        rhs = np.sum(((pa[j] - pb[j]) + e_b) ** 2)
    elif kind == "one-mask":
        if i is None:
            raise LossError("one-mask decomposition needs a second position i")
        bits = masking.as_batch(m_a)[0]
        if not bits[i]:
            raise LossError(f"position {i} is not masked")
        e_j = prediction_error(pred_a, x, j, m_a, normalize_target)
        lhs = np.sum((pa[i] - target[i]) ** 2)
        rhs = np.sum((((pa[i] - pa[j]) - (target[i] - target[j])) + e_j) ** 2)
    else:
        raise LossError(f"unknown decomposition {kind!r}")
    return float(abs(lhs - rhs))
