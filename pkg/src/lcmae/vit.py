"""Patchification, sin-cos position embeddings and the asymmetric ViT autoencoder.

The encoder only ever receives visible patches; the decoder re-inserts a
single shared mask token at every hidden position, adds fixed position
embeddings and maps each token back to pixel space.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import masking
from .diffcore import Tensor
from .nn import Block, LayerNorm, Linear, Module, param

ROLE_CLS, ROLE_VISIBLE, ROLE_MASK = 0, 1, 2


# ----------------------------------------------------------------- patches
def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, C, H, W) or (C, H, W) -> (B, n, p*p*C) / (n, p*p*C).

    Patches are ordered row-major over the grid; each patch is flattened in
    (row, col, channel) order.
    """
    imgs = np.asarray(images)
    single = imgs.ndim == 3
    if single:
        imgs = imgs[None]
    B, C, H, W = imgs.shape
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = imgs.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1)
    x = x.reshape(B, gh * gw, p * p * C)
    return x[0] if single else x


def unpatchify(patches: np.ndarray, p: int, grid: tuple[int, int] | None = None, channels: int = 3) -> np.ndarray:
    x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    B, n, D = x.shape
    if D != p * p * channels:
        raise ValueError(f"patch dim {D} != {p}*{p}*{channels}")
    if grid is None:
        g = int(round(np.sqrt(n)))
        if g * g != n:
            raise ValueError(f"cannot infer a square grid from {n} patches")
        grid = (g, g)
    gh, gw = grid
    imgs = x.reshape(B, gh, gw, p, p, channels).transpose(0, 5, 1, 3, 2, 4)
    imgs = imgs.reshape(B, channels, gh * p, gw * p)
    return imgs[0] if single else imgs


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum("m,d->md", pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(dim: int, grid_h: int, grid_w: int, cls_token: bool = False) -> np.ndarray:
    """Fixed 2-D sin-cos embeddings, (grid_h*grid_w [+1], dim); CLS row is zero."""
    if dim % 4:
        raise ValueError(f"embedding dim must be a multiple of 4, got {dim}")
    gw, gh = np.meshgrid(np.arange(grid_w, dtype=np.float64), np.arange(grid_h, dtype=np.float64))
    emb = np.concatenate([_sincos_1d(dim // 2, gh), _sincos_1d(dim // 2, gw)], axis=1)
    if cls_token:
        emb = np.concatenate([np.zeros((1, dim)), emb], axis=0)
    return emb


# ------------------------------------------------------------------ config
@dataclass
class ModelConfig:
    img_size: int = 32
    patch: int = 4
    in_chans: int = 3
    enc_depth: int = 6
    enc_dim: int = 192
    enc_heads: int = 3
    dec_depth: int = 4
    dec_dim: int = 128
    dec_heads: int = 4
    use_cls: bool = True
    mlp_ratio: float = 4.0
    decoder: str = "transformer"
    proj_dim: int = 128
    projector_input: str = "tokens"
    projector_bias: bool = True
    ae_block: int | None = None
    gauss_size: int = 5
    gauss_sigma: float = 1.0
    conv_kernel: int = 5
    dtype: str = "float32"

    @property
    def grid(self) -> int:
        return self.img_size // self.patch

    @property
    def n(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_chans

    @property
    def out_dim(self) -> int:
        if self.decoder == "ae_block":
            b = self.ae_block or self.patch
            return b * b * self.in_chans
        return self.patch_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------- records
@dataclass
class AttentionRecord:
    """Softmax attention of one layer.

    ``weights`` is (heads, T, T) for one image or (B, heads, T, T) batched.
    ``roles`` tags every token (CLS / visible / mask token) and
    ``positions`` gives its grid index (-1 for CLS).
    """

    layer: int
    weights: np.ndarray
    roles: np.ndarray
    positions: np.ndarray
    where: str = "decoder"

    @property
    def batched(self) -> bool:
        return self.weights.ndim == 4

    def image(self, i: int) -> "AttentionRecord":
        if not self.batched:
            raise ValueError("record already holds a single image")
        return AttentionRecord(self.layer, self.weights[i], self.roles[i], self.positions[i], self.where)

    def images(self) -> list["AttentionRecord"]:
        return [self.image(i) for i in range(self.weights.shape[0])]


@dataclass
class ForwardOutput:
    pred: Tensor  # (B, n, out_dim)
    tokens: Tensor  # (B, n, dec_dim) decoder features before the pixel head
    latent: Tensor  # encoder output incl. CLS
    imap: masking.IndexMap
    mask: np.ndarray  # (B, n) bool
    enc_attn: list[AttentionRecord] = field(default_factory=list)
    dec_attn: list[AttentionRecord] = field(default_factory=list)
    dec_hidden: list[np.ndarray] = field(default_factory=list)  # per decoder layer, (B, n, dec_dim)


def _roles_positions(mask: np.ndarray, keep: np.ndarray | None, use_cls: bool):
    B = mask.shape[0]
    if keep is None:
        roles = np.where(mask, ROLE_MASK, ROLE_VISIBLE)
        pos = np.broadcast_to(np.arange(mask.shape[1]), mask.shape)
    else:
        roles = np.full(keep.shape, ROLE_VISIBLE)
        pos = keep
    if use_cls:
        roles = np.concatenate([np.full((B, 1), ROLE_CLS), roles], axis=1)
        pos = np.concatenate([np.full((B, 1), -1), pos], axis=1)
    return roles, np.asarray(pos)


# ----------------------------------------------------------------- modules
class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.enc_dim, rng, dt)
        self.cls_token = param(rng.normal(0, 0.02, (1, 1, cfg.enc_dim)), dt) if cfg.use_cls else None
        self.pos_embed = sincos_pos_embed(cfg.enc_dim, cfg.grid, cfg.grid, cls_token=cfg.use_cls).astype(dt)
        self.blocks = [Block(cfg.enc_dim, cfg.enc_heads, rng, dt, cfg.mlp_ratio) for _ in range(cfg.enc_depth)]
        self.norm = LayerNorm(cfg.enc_dim, dt)

    def forward(self, x, mask, capture: bool = False):
        """Encode the visible patches of ``x`` (B, n, patch_dim).

        Returns the latent tokens (CLS first when configured), the index map
        and the per-layer attention records.
        """
        x = dc.as_tensor(x)
        B = x.shape[0]
        bits = masking.as_batch(mask, B)
        imap = masking.index_map(bits)
        if imap.keep.shape[1] == 0:
            raise masking.MaskError("encoder needs at least one visible patch")
        off = 1 if self.cfg.use_cls else 0
        x_vis = dc.gather(x, imap.keep, axis=1)
        h = self.patch_embed(x_vis) + self.pos_embed[off:][imap.keep]
        if self.cfg.use_cls:
            cls = self.cls_token + self.pos_embed[:1]
            cls = dc.mul(dc.as_tensor(np.ones((B, 1, 1), dtype=h.dtype)), cls)
            h = dc.concat([cls, h], axis=1)
        records = []
        roles, pos = _roles_positions(bits, imap.keep, self.cfg.use_cls) if capture else (None, None)
        for i, blk in enumerate(self.blocks):
            h, w = blk(h)
            if capture:
                records.append(AttentionRecord(i, w, roles, pos, "encoder"))
        return self.norm(h), imap, records


class TransformerDecoder(Module):
    """Mask-token insertion, transformer blocks and a linear pixel head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        self.cfg = cfg
        self.embed = Linear(cfg.enc_dim, cfg.dec_dim, rng, dt)
        self.mask_token = param(rng.normal(0, 0.02, (cfg.dec_dim,)), dt)
        self.pos_embed = sincos_pos_embed(cfg.dec_dim, cfg.grid, cfg.grid, cls_token=cfg.use_cls).astype(dt)
        self.blocks = [Block(cfg.dec_dim, cfg.dec_heads, rng, dt, cfg.mlp_ratio) for _ in range(cfg.dec_depth)]
        self.norm = LayerNorm(cfg.dec_dim, dt)
        self.head = Linear(cfg.dec_dim, cfg.out_dim, rng, dt)

    def fill(self, z: Tensor, imap: masking.IndexMap):
        """Embed latents, put the mask token at hidden slots, add positions.

        Returns (CLS token or None, full (B, n, dec_dim) sequence).
        """
        off = 1 if self.cfg.use_cls else 0
        y = self.embed(z)
        cls = y[:, :1, :] if off else None
        vis = y[:, off:, :] if off else y
        full = masking.insert_tokens(vis, imap, self.mask_token)
        full = full + self.pos_embed[off:]
        if cls is not None:
            cls = cls + self.pos_embed[:1]
        return cls, full

    def forward(self, z: Tensor, imap: masking.IndexMap, mask: np.ndarray, capture: bool = False):
        if z.shape[1] - (1 if self.cfg.use_cls else 0) != imap.keep.shape[1]:
            raise masking.MaskError(f"latent length {z.shape[1]} does not match the mask's visible count")
        cls, h = self.fill(z, imap)
        if cls is not None:
            h = dc.concat([cls, h], axis=1)
        off = 1 if cls is not None else 0
        records, hidden = [], []
        roles, pos = _roles_positions(mask, None, self.cfg.use_cls) if capture else (None, None)
        for i, blk in enumerate(self.blocks):
            h, w = blk(h)
            if capture:
                records.append(AttentionRecord(i, w, roles, pos, "decoder"))
                hidden.append(h.data[:, off:, :])
        tokens = self.norm(h)
        tokens = tokens[:, off:, :] if off else tokens
        return self.head(tokens), tokens, records, hidden


def build_decoder(cfg: ModelConfig, rng: np.random.Generator) -> Module:
    if cfg.decoder in ("transformer", "ae_block"):
        return TransformerDecoder(cfg, rng)
    from . import altdecoders

    if cfg.decoder == "weighted_avg":
        return altdecoders.WeightedAverageDecoder(cfg, rng)
    if cfg.decoder == "conv":
        return altdecoders.ConvDecoder(cfg, rng)
    raise ValueError(f"unknown decoder variant {cfg.decoder!r}")


class MaskedAutoencoder(Module):
    """Encoder f, decoder g and the contrastive projector p."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = build_decoder(cfg, rng)
        proj_in = cfg.out_dim if cfg.projector_input == "pixels" else cfg.dec_dim
        if cfg.projector_input not in ("tokens", "pixels"):
            raise ValueError(f"projector_input must be 'tokens' or 'pixels', got {cfg.projector_input!r}")
        self.projector = Linear(proj_in, cfg.proj_dim, rng, np.dtype(cfg.dtype), bias=cfg.projector_bias)

    def encode(self, x, mask, capture: bool = False):
        return self.encoder(x, mask, capture)

    def decode(self, z: Tensor, imap: masking.IndexMap, mask, capture: bool = False):
        bits = masking.as_batch(mask, z.shape[0])
        return self.decoder(z, imap, bits, capture)

    def forward(self, x, mask, capture: bool = False) -> ForwardOutput:
        x = dc.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.cfg.n:
            raise ValueError(f"expected (B, {self.cfg.n}, patch_dim) patches, got {x.shape}")
        bits = masking.as_batch(mask, x.shape[0])
        z, imap, enc_rec = self.encode(x, bits, capture)
        pred, tokens, dec_rec, hidden = self.decode(z, imap, bits, capture)
        return ForwardOutput(pred, tokens, z, imap, bits, enc_rec, dec_rec, hidden)

    def project(self, out: ForwardOutput) -> Tensor:
        src = out.pred if self.cfg.projector_input == "pixels" else out.tokens
        return self.projector(src)


def forward_mae(x, mask, model: MaskedAutoencoder, capture: bool = False):
    """Returns (pixel predictions, decoder attention records, projector inputs)."""
    out = model(x, mask, capture)
    src = out.pred if model.cfg.projector_input == "pixels" else out.tokens
    return out.pred, out.dec_attn, src
