"""Exact-count random patch masks and visible/masked token routing.

A mask bit of 1 means the patch is hidden from the encoder. Every mask drawn
here has exactly ``round(ratio * n)`` ones (round half away from zero), chosen
uniformly among all subsets of that size by shuffling indices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class MaskError(ValueError):
    pass


def masked_count(n: int, ratio: float) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise MaskError(f"mask ratio must lie in [0, 1], got {ratio}")
    if n < 1:
        raise MaskError(f"token count must be >= 1, got {n}")
    return int(math.floor(ratio * n + 0.5))


class RngState:
    """Seeded random stream. Same ``(seed, stream)`` gives the same draws.

    Parallel workers should use distinct ``stream`` ids.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(self.stream,)))
        )

    def fork(self, stream: int) -> "RngState":
        return RngState(self.seed, stream)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, stream={self.stream})"


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngState):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return RngState(int(rng)).generator


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1:
            raise MaskError(f"mask must be 1-D, got shape {bits.shape}")
        if not np.all((bits == 0) | (bits == 1)):
            raise MaskError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def n(self) -> int:
        return int(self.bits.size)

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @property
    def ratio(self) -> float:
        return self.popcount / self.n

    @property
    def bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    def complement(self) -> "Mask":
        return Mask(1 - self.bits)

    def pack(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    @classmethod
    def unpack(cls, data: bytes, n: int) -> "Mask":
        return cls(np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n))

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())


def sample_mask(n: int, ratio: float, rng) -> Mask:
    k = masked_count(n, ratio)
    order = _gen(rng).permutation(n)
    bits = np.zeros(n, dtype=np.uint8)
    bits[order[:k]] = 1
    return Mask(bits)


def sample_mask_pair(n: int, ratio: float, rng) -> tuple[Mask, Mask]:
    return sample_mask(n, ratio, rng), sample_mask(n, ratio, rng)


def sample_masks(batch: int, n: int, ratio: float, rng) -> np.ndarray:
    """A (batch, n) boolean array of independent exact-count masks."""
    k = masked_count(n, ratio)
    noise = _gen(rng).random((batch, n))
    order = np.argsort(noise, axis=1, kind="stable")
    bits = np.zeros((batch, n), dtype=bool)
    np.put_along_axis(bits, order[:, :k], True, axis=1)
    return bits


def intersect(m1: Mask, m2: Mask) -> Mask:
    if m1.n != m2.n:
        raise MaskError(f"mask lengths differ: {m1.n} vs {m2.n}")
    return Mask(m1.bits & m2.bits)


def as_batch(mask, batch: int | None = None) -> np.ndarray:
    """Normalize a Mask / 1-D / 2-D bit array to a (B, n) boolean array."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    bits = bits.astype(bool)
    if bits.ndim == 1:
        bits = bits[None, :] if batch is None else np.broadcast_to(bits, (batch, bits.size))
    if batch is not None and bits.shape[0] != batch:
        raise MaskError(f"mask batch {bits.shape[0]} != {batch}")
    return bits


@dataclass(frozen=True)
class IndexMap:
    """Where the visible tokens of each row live in the full sequence."""

    keep: np.ndarray  # (B, n_visible) positions, ascending
    n: int

    @property
    def restore(self) -> np.ndarray:
        """Permutation that undoes ``concat([visible, masked-fill])``."""
        B = self.keep.shape[0]
        full = np.zeros((B, self.n), dtype=bool)
        np.put_along_axis(full, self.keep, True, axis=1)
        masked = np.nonzero(~full)[1].reshape(B, -1)
        order = np.concatenate([self.keep, masked], axis=1)
        return np.argsort(order, axis=1)


def index_map(mask, batch: int | None = None) -> IndexMap:
    bits = as_batch(mask, batch)
    counts = (~bits).sum(axis=1)
    if np.any(counts != counts[0]):
        raise MaskError("all rows in a batch must have the same visible count")
    keep = np.nonzero(~bits)[1].reshape(bits.shape[0], int(counts[0]))
    return IndexMap(keep=keep, n=bits.shape[1])


def split_tokens(seq, mask) -> tuple:
    """Visible tokens of ``seq`` (B, n, d) in original order, plus the index map."""
    t = dc.as_tensor(seq)
    squeeze = t.ndim == 2
    if squeeze:
        t = t.reshape(1, *t.shape)
    bits = as_batch(mask, t.shape[0])
    if bits.shape[1] != t.shape[1]:
        raise MaskError(f"mask length {bits.shape[1]} != sequence length {t.shape[1]}")
    imap = index_map(bits)
    visible = dc.gather(t, imap.keep, axis=1)
    if squeeze:
        visible = visible.reshape(visible.shape[1:])
    return visible, imap


def insert_tokens(visible, imap: IndexMap, fill) -> Tensor:
    """Place visible tokens back at their positions; other slots take ``fill``.

    ``fill`` is a (d,) vector or a (B, n, d) array used as the base sequence.
    """
    v = dc.as_tensor(visible)
    squeeze = v.ndim == 2
    if squeeze:
        v = v.reshape(1, *v.shape)
    B, _, d = v.shape
    fill = dc.as_tensor(fill)
    if fill.ndim == 1:
        base = dc.mul(dc.as_tensor(np.ones((B, imap.n, 1), dtype=v.dtype)), fill)
    else:
        base = fill
    out = dc.scatter(base, imap.keep, v, axis=1)
    return out.reshape(out.shape[1:]) if squeeze else out
