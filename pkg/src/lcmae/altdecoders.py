"""Local decoders and block-prediction autoencoder targets.

Two drop-in replacements for the transformer decoder, both with a hard
receptive field: a fixed Gaussian weighted average of neighbouring tokens
followed by a small MLP, and a single learned 5x5 convolution followed by a
linear pixel head. ``ae_block_targets`` builds the per-token BxB pixel blocks
used by the unmasked block-prediction autoencoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import masking
from .diffcore import Tensor
from .nn import LayerNorm, Linear, MLP, Module, param
from .vit import ModelConfig, sincos_pos_embed


@dataclass(frozen=True)
class GaussianKernel:
    size: int
    sigma: float
    weights: np.ndarray


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> GaussianKernel:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma ** 2))
    return GaussianKernel(size, sigma, w / w.sum())


def averaging_matrix(grid: int, kernel: GaussianKernel) -> np.ndarray:
    """(n, n) matrix whose row q holds the kernel weights around cell q.

    Neighbours outside the grid are dropped and the remaining weights
    renormalized to sum to one.
    """
    n = grid * grid
    r = kernel.size // 2
    M = np.zeros((n, n))
    for qy in range(grid):
        for qx in range(grid):
            q = qy * grid + qx
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    ky, kx = qy + dy, qx + dx
                    if 0 <= ky < grid and 0 <= kx < grid:
                        M[q, ky * grid + kx] = kernel.weights[dy + r, dx + r]
            M[q] /= M[q].sum()
    return M


def _grid_side(n: int) -> int:
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    return g


def weighted_average(tokens, kernel: GaussianKernel) -> Tensor:
    """Kernel-weighted average of each token's grid neighbourhood; (B, n, d) -> (B, n, d)."""
    t = dc.as_tensor(tokens)
    M = averaging_matrix(_grid_side(t.shape[-2]), kernel).astype(t.dtype)
    return dc.matmul(dc.as_tensor(M), t)


def weighted_avg_decode(tokens, mask, kernel: GaussianKernel, head: MLP | None = None) -> Tensor:
    """Average a filled token grid, then map features to pixels with ``head``.

    ``tokens`` must already carry the mask token at hidden slots; ``mask`` is
    only validated against the grid.
    """
    t = dc.as_tensor(tokens)
    bits = masking.as_batch(mask, t.shape[0] if t.ndim == 3 else None)
    if bits.shape[1] != t.shape[-2]:
        raise ValueError(f"mask length {bits.shape[1]} != token count {t.shape[-2]}")
    avg = weighted_average(t, kernel)
    return head(avg) if head is not None else avg


def conv_decode(tokens, conv_weight, conv_bias=None, head: Linear | None = None) -> Tensor:
    """One 'same' convolution over the token grid followed by ``head``."""
    t = dc.as_tensor(tokens)
    B, n, d = t.shape
    g = _grid_side(n)
    img = dc.transpose(t, (0, 2, 1)).reshape(B, d, g, g)
    out = dc.conv2d(img, conv_weight, conv_bias)
    out = dc.transpose(out.reshape(B, out.shape[1], n), (0, 2, 1))
    return head(out) if head is not None else out


class _FillMixin(Module):
    def _setup_fill(self, cfg: ModelConfig, rng, dt):
        self.cfg = cfg
        self.embed = Linear(cfg.enc_dim, cfg.dec_dim, rng, dt)
        self.mask_token = param(rng.normal(0, 0.02, (cfg.dec_dim,)), dt)
        self.pos_embed = sincos_pos_embed(cfg.dec_dim, cfg.grid, cfg.grid).astype(dt)

    def _fill(self, z: Tensor, imap: masking.IndexMap) -> Tensor:
        off = 1 if self.cfg.use_cls else 0
        y = self.embed(z)
        vis = y[:, off:, :] if off else y
        return masking.insert_tokens(vis, imap, self.mask_token) + self.pos_embed


class WeightedAverageDecoder(_FillMixin):
    """Fixed Gaussian mixing (no trainable weights) + 2-layer GELU MLP head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        self._setup_fill(cfg, rng, dt)
        self.kernel = gaussian_kernel(cfg.gauss_size, cfg.gauss_sigma)
        self.norm = LayerNorm(cfg.dec_dim, dt)
        self.head = MLP(cfg.dec_dim, cfg.dec_dim, cfg.out_dim, rng, dt)

    def forward(self, z, imap, mask, capture: bool = False):
        full = self._fill(z, imap)
        feats = self.norm(weighted_average(full, self.kernel))
        return self.head(feats), feats, [], []


class ConvDecoder(_FillMixin):
    """Single learned k x k convolution + linear pixel head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        self._setup_fill(cfg, rng, dt)
        k, d = cfg.conv_kernel, cfg.dec_dim
        bound = np.sqrt(6.0 / (2 * d * k * k))
        self.conv_weight = param(rng.uniform(-bound, bound, (d, d, k, k)), dt)
        self.conv_bias = param(np.zeros(d), dt)
        self.norm = LayerNorm(d, dt)
        self.head = Linear(d, cfg.out_dim, rng, dt)

    def forward(self, z, imap, mask, capture: bool = False):
        full = self._fill(z, imap)
        feats = self.norm(conv_decode(full, self.conv_weight, self.conv_bias))
        return self.head(feats), feats, [], []


def delta_kernel(channels: int, k: int, dtype=np.float64) -> np.ndarray:
    """Conv weight that copies every channel (identity map)."""
    w = np.zeros((channels, channels, k, k), dtype=dtype)
    w[np.arange(channels), np.arange(channels), k // 2, k // 2] = 1.0
    return w


# ------------------------------------------------------------ block targets
@dataclass(frozen=True)
class BlockTargetSpec:
    """Side ``block`` of the pixel square each token predicts, patch size ``patch``.

    The block around a grid cell starts at ``row * patch + (patch - block) // 2``
    (floor division), so ``block == patch`` reproduces the cell itself and an
    even ``block`` spans ``[c - block/2, c + block/2)`` around the cell centre.
    """

    block: int
    patch: int

    def __post_init__(self):
        if self.block < self.patch:
            raise ValueError(f"block size {self.block} smaller than patch size {self.patch}")


def desk_block_grid(img_size: int, patch: int) -> list[int]:
    """Scaled analogue of the 16/48/80/112 block ladder: p, 2p, 3p, ceil(0.875*img)."""
    return [patch, 2 * patch, 3 * patch, int(np.ceil(0.875 * img_size))]


def ae_block_targets(image: np.ndarray, spec: BlockTargetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-token BxB pixel blocks and their validity mask.

    ``image`` is (C, H, W) or (B, C, H, W). Returns ``(targets, valid)`` with
    shape (B, n, block*block*C) in (row, col, channel) order; pixels beyond
    the image border are zero and flagged invalid.
    """
    imgs = np.asarray(image)
    single = imgs.ndim == 3
    if single:
        imgs = imgs[None]
    Bn, C, H, W = imgs.shape
    p, b = spec.patch, spec.block
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch {p}")
    gh, gw = H // p, W // p
    off = (p - b) // 2
    pad = max(0, -off, b)
    padded = np.pad(imgs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    inside = np.pad(np.ones((H, W), dtype=bool), pad)
    # sliding windows over the padded image: (B, C, H', W', b, b)
    win = np.lib.stride_tricks.sliding_window_view(padded, (b, b), axis=(2, 3))
    vwin = np.lib.stride_tricks.sliding_window_view(inside, (b, b))
    ys = np.arange(gh) * p + off + pad
    xs = np.arange(gw) * p + off + pad
    blocks = win[:, :, ys][:, :, :, xs]  # B, C, gh, gw, b, b
    valid = vwin[ys][:, xs]  # gh, gw, b, b
    targets = blocks.transpose(0, 2, 3, 4, 5, 1).reshape(Bn, gh * gw, b * b * C)
    vmask = np.broadcast_to(valid[..., None], (gh, gw, b, b, C)).reshape(gh * gw, b * b * C)
    vmask = np.broadcast_to(vmask, targets.shape).copy()
    if single:
        return targets[0].copy(), vmask[0]
    return targets.copy(), vmask


def normalize_block_targets(targets: np.ndarray, valid: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Standardize each block over its valid pixels; invalid entries stay zero."""
    cnt = valid.sum(axis=-1, keepdims=True)
    mu = (targets * valid).sum(axis=-1, keepdims=True) / cnt
    var = (((targets - mu) * valid) ** 2).sum(axis=-1, keepdims=True) / cnt
    return np.where(valid, (targets - mu) / np.sqrt(var + eps), 0.0)


def loss_ae(pred, targets: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean squared error over all tokens and valid block pixels."""
    pred = dc.as_tensor(pred)
    targets = np.asarray(targets)
    if pred.shape != targets.shape:
        raise ValueError(f"prediction {pred.shape} and targets {targets.shape} disagree")
    diff = pred - targets.astype(pred.dtype)
    sq = diff * diff
    if valid is None:
        return sq.mean()
    valid = np.asarray(valid)
    return (sq * valid.astype(pred.dtype)).sum() / float(valid.sum())
