"""Runs the analysis instruments on a trained model and returns CSV-ready rows.

Layers are numbered from 0. Decoder metrics use one fixed random mask shared
by every analysis image (seed ``analysis["mask_seed"]``); encoder attention
distances are measured with the whole image visible.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import analysis, masking
from .. import diffcore as dc
from ..vit import ROLE_MASK, MaskedAutoencoder, patchify
from .data import ImageDataset
from .presets import ExperimentPreset


def analysis_indices(preset: ExperimentPreset, ds: ImageDataset) -> np.ndarray:
    k = min(int(preset.analysis.get("images", 32)), len(ds))
    rng = np.random.default_rng(int(preset.analysis.get("mask_seed", 0)))
    return np.sort(rng.choice(len(ds), size=k, replace=False))


def shared_mask(preset: ExperimentPreset) -> masking.Mask:
    seed = int(preset.analysis.get("mask_seed", 0))
    return masking.sample_mask(preset.model.n, preset.mask_ratio, masking.RngState(seed, 0))


def _row(experiment, layer, head, metric, value, seed):
    return {"experiment": experiment, "layer": layer, "head": head, "metric": metric,
            "value": float(value), "seed": seed}


def encoder_distances(model: MaskedAutoencoder, images: np.ndarray) -> list:
    """Per-layer (heads,) attention distances with nothing masked."""
    cfg = model.cfg
    x = patchify(images, cfg.patch)
    with dc.no_grad():
        _, _, recs = model.encode(x, np.zeros((len(x), cfg.n), dtype=bool), capture=True)
    return [analysis.attention_distance(r, cfg.grid, cfg.patch, "all") for r in recs]


def analyze(model: MaskedAutoencoder, preset: ExperimentPreset, ds: ImageDataset, seed: int = 0,
            reference: analysis.ReferenceFeatures | None = None, dump_dir=None) -> list[dict]:
    cfg = model.cfg
    name = preset.name
    idx = analysis_indices(preset, ds)
    images = ds.images[idx]
    rows = []
    for layer, d in enumerate(encoder_distances(model, images)):
        for h, v in enumerate(d):
            rows.append(_row(name, layer, h, "attn_dist_enc", v, seed))
        rows.append(_row(name, layer, "mean", "attn_dist_enc", np.mean(d), seed))

    if preset.mask_ratio > 0 and masking.masked_count(cfg.n, preset.mask_ratio) < cfg.n:
        m = shared_mask(preset)
        x = patchify(images, cfg.patch)
        with dc.no_grad():
            out = model(x, np.broadcast_to(m.bool, (len(x), cfg.n)), capture=True)
        for rec in out.dec_attn:
            per_img = rec.images()
            if len(per_img) >= 2:
                per_head = analysis.attn_similarity(per_img, per_head=True)
                for h, v in enumerate(per_head):
                    rows.append(_row(name, rec.layer, h, "s_attn", v, seed))
                rows.append(_row(name, rec.layer, "mean", "s_attn", analysis.attn_similarity(per_img), seed))
            for sel in ("all", "mask", "visible"):
                d = analysis.attention_distance(rec, cfg.grid, cfg.patch, sel)
                if not np.all(np.isnan(d)):
                    rows.append(_row(name, rec.layer, "mean", f"attn_dist_dec_{sel}", np.nanmean(d), seed))
        if reference is not None:
            if reference.features.shape[0] != len(idx):
                raise analysis.AnalysisError(
                    f"reference has {reference.features.shape[0]} images, analysis uses {len(idx)}")
            W_ref = reference.weights()
            for layer, hid in enumerate(out.dec_hidden):
                W_dec = [analysis.feature_sim_weights(h) for h in hid]
                rows.append(_row(name, layer, "mean", "s_sim", analysis.reference_similarity(W_ref, W_dec), seed))
        if dump_dir is not None:
            dump_dir = Path(dump_dir)
            first = out.dec_attn[0].image(0) if out.dec_attn else None
            if first is not None:
                q = int(np.flatnonzero(first.roles == ROLE_MASK)[0])
                for rec in out.dec_attn:
                    analysis.dump_attention(rec.image(0), q, dump_dir / f"dec_layer{rec.layer}_q{q}.pgm", cfg.grid)
    return rows
