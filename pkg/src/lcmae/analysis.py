"""Diagnostics over captured attention and features.

* attention-map similarity across images under one shared mask
* similarity-weight matrices and their agreement with a reference model
* attention distance (attention-weighted query/key pixel distance)
* a collapse detector for projected tokens
* PGM dumps of single attention rows
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Tensor
from .vit import ROLE_CLS, ROLE_MASK, ROLE_VISIBLE, AttentionRecord

COLLAPSE_THRESHOLD = 1e-3
COLLAPSE_DECAY = 100.0


class AnalysisError(ValueError):
    pass


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _pairwise_mean_cos(maps: np.ndarray) -> float:
    """Mean cosine over ordered pairs i != j of the rows of ``maps`` (I, D)."""
    I = maps.shape[0]
    unit = maps / np.linalg.norm(maps, axis=1, keepdims=True)
    G = unit @ unit.T
    return float((G.sum() - np.trace(G)) / (I * (I - 1)))


# ------------------------------------------------------------ attention sim
def mask_token_maps(records: list[AttentionRecord], include_cls_key: bool = False) -> np.ndarray:
    """Stack each image's (k, heads, n) mask-token attention map; errors if masks differ."""
    if len(records) < 2:
        raise AnalysisError("attention similarity needs at least two images")
    maps, ref_rows = [], None
    for rec in records:
        if rec.batched:
            raise AnalysisError("pass one record per image (use AttentionRecord.images())")
        rows = np.flatnonzero(rec.roles == ROLE_MASK)
        q_pos = rec.positions[rows]
        if ref_rows is None:
            ref_rows = q_pos
        elif not np.array_equal(ref_rows, q_pos):
            raise AnalysisError("all images must share the identical mask")
        keys = np.arange(rec.weights.shape[-1]) if include_cls_key else np.flatnonzero(rec.roles != ROLE_CLS)
        A = rec.weights[:, rows][:, :, keys]  # heads, k, n
        maps.append(A.transpose(1, 0, 2))
    if ref_rows is None or ref_rows.size == 0:
        raise AnalysisError("records contain no mask-token queries")
    return np.stack(maps)


def attn_similarity(records: list[AttentionRecord], per_head: bool = False,
                    include_cls_key: bool = False) -> float | np.ndarray:
    """Mean pairwise cosine of mask-token attention maps across images (one layer).

    By default the whole (k, heads, n) map is flattened; ``per_head`` returns
    one value per head instead.
    """
    maps = mask_token_maps(records, include_cls_key)
    I = maps.shape[0]
    if per_head:
        return np.array([_pairwise_mean_cos(maps[:, :, h, :].reshape(I, -1)) for h in range(maps.shape[2])])
    return _pairwise_mean_cos(maps.reshape(I, -1))


# ------------------------------------------------------------ feature sim
@dataclass
class SimilarityWeights:
    W: np.ndarray
    normalized: bool = True


def feature_sim_weights(features: np.ndarray, normalize: bool = True) -> SimilarityWeights:
    """Patch-by-patch cosine matrix, min-max scaled to [0, 1] over off-diagonal entries.

    The diagonal is pinned to 1 and the result is exactly symmetric. A matrix
    whose off-diagonal entries are all equal maps to all ones.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise AnalysisError(f"features must be (n, d), got {f.shape}")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise AnalysisError("zero-norm feature row")
    u = f / norms[:, None]
    W = u @ u.T
    W = 0.5 * (W + W.T)
    np.fill_diagonal(W, 1.0)
    if not normalize:
        return SimilarityWeights(W, normalized=False)
    n = W.shape[0]
    off = ~np.eye(n, dtype=bool)
    if n < 2:
        return SimilarityWeights(np.ones_like(W))
    lo, hi = W[off].min(), W[off].max()
    if hi - lo <= 0:
        return SimilarityWeights(np.ones_like(W))
    out = (W - lo) / (hi - lo)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return SimilarityWeights(out)


def reference_similarity(W_ref: list, W_dec: list) -> float:
    """Mean over images of cos(W_ref[i], W_dec[i]) on flattened matrices."""
    if len(W_ref) != len(W_dec) or len(W_ref) == 0:
        raise AnalysisError(f"image sets differ: {len(W_ref)} vs {len(W_dec)}")
    vals = []
    for a, b in zip(W_ref, W_dec):
        a = a.W if isinstance(a, SimilarityWeights) else np.asarray(a)
        b = b.W if isinstance(b, SimilarityWeights) else np.asarray(b)
        if a.shape != b.shape:
            raise AnalysisError(f"grid mismatch {a.shape} vs {b.shape}")
        vals.append(_cos(a, b))
    return float(np.mean(vals))


@dataclass
class ReferenceFeatures:
    """Per-image (n, d) features from a fixed reference model."""

    features: np.ndarray  # (I, n, d)
    provenance: str

    def weights(self) -> list[SimilarityWeights]:
        return [feature_sim_weights(f) for f in self.features]


# ------------------------------------------------------- attention distance
def grid_centers(grid: int, patch: int) -> np.ndarray:
    """(n, 2) pixel coordinates of patch centres, row-major."""
    r, c = np.divmod(np.arange(grid * grid), grid)
    return np.stack([r, c], axis=1) * float(patch) + patch / 2.0


def attention_distance(record: AttentionRecord, grid: int, patch: int,
                       queries: str = "all") -> np.ndarray:
    """Per-head mean over queries of sum_k a[q, k] * ||c_q - c_k|| in pixels.

    The CLS row and column are dropped and the remaining key weights of each
    query are renormalized to sum to one. ``queries`` selects ``"all"``,
    ``"mask"`` or ``"visible"`` query rows. Batched records are averaged over
    images.
    """
    if grid < 1 or patch < 1:
        raise AnalysisError(f"malformed grid {grid} / patch {patch}")
    if record.batched:
        return np.mean([attention_distance(r, grid, patch, queries) for r in record.images()], axis=0)
    roles, pos = record.roles, record.positions
    if pos.max() >= grid * grid:
        raise AnalysisError(f"position {pos.max()} outside a {grid}x{grid} grid")
    keys = np.flatnonzero(roles != ROLE_CLS)
    if queries == "all":
        rows = keys
    elif queries == "mask":
        rows = np.flatnonzero(roles == ROLE_MASK)
    elif queries == "visible":
        rows = np.flatnonzero(roles == ROLE_VISIBLE)
    else:
        raise AnalysisError(f"unknown query selection {queries!r}")
    if rows.size == 0:
        return np.full(record.weights.shape[0], np.nan)
    centers = grid_centers(grid, patch)
    qc, kc = centers[pos[rows]], centers[pos[keys]]
    dist = np.sqrt(((qc[:, None, :] - kc[None, :, :]) ** 2).sum(-1))  # q, k
    A = record.weights[:, rows][:, :, keys].astype(np.float64)
    A = A / A.sum(axis=-1, keepdims=True)
    return (A * dist[None]).sum(-1).mean(-1)


def distance_summary(records: list[AttentionRecord], grid: int, patch: int) -> list[dict]:
    """Per-layer rows with per-head and mean distances for all/mask/visible queries."""
    rows = []
    for rec in records:
        for sel in ("all", "mask", "visible"):
            d = attention_distance(rec, grid, patch, sel)
            if np.all(np.isnan(d)):
                continue
            for h, val in enumerate(d):
                rows.append({"layer": rec.layer, "head": h, "queries": sel, "value": float(val)})
            rows.append({"layer": rec.layer, "head": "mean", "queries": sel, "value": float(np.mean(d))})
    return rows


# --------------------------------------------------------------- collapse
@dataclass
class CollapseReport:
    per_position: np.ndarray
    aggregate: float
    initial: float | None = None
    collapsed: bool = False
    details: dict = field(default_factory=dict)


def collapse_metric(v: np.ndarray, initial: float | None = None, min_batch: int = 8) -> CollapseReport:
    """Spread of unit-normalized projected tokens across a batch of distinct images.

    For each position, the variance across images summed over feature dims
    (total variance, population form). The aggregate is the mean over
    positions. Collapse is declared when the aggregate is below 1e-3 and has
    fallen at least 100x from ``initial``.
    """
    if isinstance(v, Tensor):
        v = v.data
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 3:
        raise AnalysisError(f"expected (batch, n, d) tokens, got {v.shape}")
    if v.shape[0] < min_batch:
        raise AnalysisError(f"collapse metric needs >= {min_batch} images, got {v.shape[0]}")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / np.where(norms == 0, 1.0, norms)
    per_pos = u.var(axis=0).sum(axis=-1)
    agg = float(per_pos.mean())
    collapsed = False
    if initial is not None:
        collapsed = agg < COLLAPSE_THRESHOLD and agg * COLLAPSE_DECAY <= initial
    return CollapseReport(per_pos, agg, initial, collapsed)


# ------------------------------------------------------------------- dumps
def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def attention_image(record: AttentionRecord, query_index: int, grid: int) -> tuple[np.ndarray, float | None]:
    """Min-max scaled g x g uint8 map of one query's attention over patch keys.

    A flat map becomes mid-gray (128). Returns the map and the CLS weight.
    """
    if record.batched:
        raise AnalysisError("pass a single-image record")
    if not 0 <= query_index < record.weights.shape[1]:
        raise AnalysisError(f"query index {query_index} out of range")
    row = record.weights[:, query_index].mean(axis=0)
    keys = np.flatnonzero(record.roles != ROLE_CLS)
    cls = np.flatnonzero(record.roles == ROLE_CLS)
    cls_w = float(row[cls].sum()) if cls.size else None
    full = np.zeros(grid * grid)
    full[record.positions[keys]] = row[keys]
    lo, hi = full.min(), full.max()
    if hi - lo <= 0:
        img = np.full(grid * grid, 128, dtype=np.uint8)
    else:
        img = np.round((full - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return img.reshape(grid, grid), cls_w


def dump_attention(record: AttentionRecord, query_index: int, out_path, grid: int) -> Path:
    """Write the query's attention as a binary PGM plus a ``.txt`` sidecar."""
    img, cls_w = attention_image(record, query_index, grid)
    out_path = Path(out_path)
    try:
        os.makedirs(out_path.parent, exist_ok=True)
        write_pgm(out_path, img)
        side = out_path.with_suffix(".txt")
        side.write_text(
            f"layer {record.layer} ({record.where})\nquery_index {query_index}\n"
            f"query_position {int(record.positions[query_index])}\n"
            f"cls_weight {'none' if cls_w is None else repr(cls_w)}\n"
        )
    except OSError as exc:
        raise AnalysisError(f"could not write attention dump: {exc}") from exc
    return out_path
