"""Sweeps: train every point of a preset family with shared seeds, analyze, summarize."""
from __future__ import annotations

import json
import logging
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..analysis import ReferenceFeatures
from .data import ImageDataset
from .evaluate import analysis_indices, analyze
from .presets import DECODER_VARIANTS, MASK_RATIOS, ConfigError, ExperimentPreset, get_preset
from .reference import classifier_features, load_reference, train_classifier
from .report import emit_report
from .train import resolve_dataset, train

log = logging.getLogger(__name__)

SWEEP_KINDS = ("ablation", "mask-ratio", "decoder-variant", "ae-blocks", "single-image", "decoder-layers")


def sweep_presets(kind: str, profile: str = "tiny") -> list[ExperimentPreset]:
    if kind == "ablation":
        names = [f"ablation-{k}" for k in "abcdefg"]
    elif kind.startswith("ablation-") and len(kind) == 10:
        names = [kind]
    elif kind == "mask-ratio":
        names = [f"mask-ratio-{r}" for r in MASK_RATIOS]
    elif kind == "decoder-variant":
        names = [f"decoder-{v}" for v in DECODER_VARIANTS]
    elif kind == "ae-blocks":
        names = [f"ae-block-{b}" for b in (4, 8, 12, 28)]
    elif kind == "single-image":
        names = ["single-image", "mae"]
    elif kind == "decoder-layers":
        names = ["decoder-depth-4"]
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}; expected one of {SWEEP_KINDS} or ablation-a..g")
    return [get_preset(n, profile) for n in names]


@dataclass
class SweepPoint:
    preset: str
    seed: int
    status: str = "ok"
    error: str = ""
    metrics: list[dict] = field(default_factory=list)
    collapse_step: int | None = None
    final_l_mae: float | None = None


@dataclass
class SweepReport:
    kind: str
    points: list[SweepPoint]
    summary: dict

    @property
    def failed(self) -> list[SweepPoint]:
        return [p for p in self.points if p.status != "ok"]

    def metric(self, preset: str, metric: str, layer=None, head="mean") -> dict[int, float]:
        """{seed: value} for one preset/metric/layer."""
        out = {}
        for p in self.points:
            if p.preset != preset or p.status != "ok":
                continue
            for r in p.metrics:
                if r["metric"] == metric and r["head"] == head and (layer is None or r["layer"] == layer):
                    out[p.seed] = r["value"]
        return out


def last_layer(points: list[SweepPoint], preset: str, metric: str) -> dict[int, float]:
    vals = {}
    for p in points:
        if p.preset == preset and p.status == "ok":
            rows = [r for r in p.metrics if r["metric"] == metric and r["head"] == "mean"]
            if rows:
                vals[p.seed] = max(rows, key=lambda r: r["layer"])["value"]
    return vals


def _summarize(kind: str, presets: list[ExperimentPreset], points: list[SweepPoint], seeds) -> dict:
    s: dict = {"kind": kind, "seeds": list(seeds), "failed": [f"{p.preset}/s{p.seed}" for p in points if p.status != "ok"]}
    enc = {pr.name: last_layer(points, pr.name, "attn_dist_enc") for pr in presets}
    s["last_layer_attn_dist"] = {k: {str(sd): v for sd, v in d.items()} for k, d in enc.items()}
    if kind == "mask-ratio":
        ratios = [pr.mask_ratio for pr in presets]
        means = [float(np.mean(list(enc[pr.name].values()))) if enc[pr.name] else np.nan for pr in presets]
        s["ratios"] = ratios
        s["mean_distance"] = means
        ok = not np.any(np.isnan(means))
        s["spearman_of_means"] = float(spearmanr(ratios, means)[0]) if ok else None
        per_seed = []
        for sd in seeds:
            ds = [enc[pr.name].get(sd) for pr in presets]
            if None not in ds:
                per_seed.append(float(spearmanr(ratios, ds)[0]))
        s["spearman_per_seed"] = per_seed
        s["spearman_mean_over_seeds"] = float(np.mean(per_seed)) if per_seed else None
    elif kind == "ae-blocks":
        blocks = [pr.model.ae_block for pr in presets]
        means = [float(np.mean(list(enc[pr.name].values()))) if enc[pr.name] else np.nan for pr in presets]
        s["blocks"] = blocks
        s["mean_distance"] = means
        s["nondecreasing"] = bool(np.all(np.diff(means) >= 0))
    elif kind.startswith("ablation"):
        s["collapse_step"] = {pr.name: {str(p.seed): p.collapse_step for p in points if p.preset == pr.name}
                              for pr in presets}
    elif kind == "decoder-layers":
        pts = [p for p in points if p.status == "ok"]
        layers = sorted({r["layer"] for p in pts for r in p.metrics if r["metric"] == "s_attn"})
        s["s_attn"] = {str(l): {str(p.seed): next(r["value"] for r in p.metrics if r["metric"] == "s_attn"
                                                   and r["layer"] == l and r["head"] == "mean") for p in pts}
                       for l in layers}
    s["final_l_mae"] = {pr.name: {str(p.seed): p.final_l_mae for p in points if p.preset == pr.name} for pr in presets}
    return s


def _reference(presets, ds: ImageDataset, source, seed: int = 0) -> ReferenceFeatures | None:
    if source in (None, "", "none"):
        return None
    pr = presets[0]
    idx = analysis_indices(pr, ds)
    if source == "classifier":
        model, acc = train_classifier(ds, pr.model, seed=seed)
        return classifier_features(model, ds.images[idx], f"classifier:seed={seed}:train_acc={acc:.3f}")
    return load_reference(source)


def run_sweep(kind: str, profile: str = "tiny", seeds=None, steps: int | None = None, out_dir=None,
              dataset: ImageDataset | None = None, reference="classifier", presets=None) -> SweepReport:
    """Train and analyze every point; a failing point is recorded and skipped."""
    presets = presets if presets is not None else sweep_presets(kind, profile)
    seeds = list(seeds) if seeds is not None else list(presets[0].seeds)
    out = Path(out_dir) if out_dir is not None else None
    base_ds = dataset if dataset is not None else resolve_dataset(get_preset("mae", profile))
    needs_ref = any(pr.model.decoder == "transformer" and pr.mask_ratio > 0 for pr in presets)
    ref = _reference(presets, base_ds, reference) if needs_ref else None
    points, logs, rows = [], {}, []
    for pr in presets:
        ds = base_ds
        if pr.data.indices is not None:
            ds = base_ds.subset(pr.data.indices)
        for sd in seeds:
            pt = SweepPoint(pr.name, sd)
            pdir = out / "points" / f"{pr.name}_s{sd}" if out is not None else None
            try:
                res = train(pr, sd, out_dir=pdir, dataset=ds, steps=steps)
                # analysis images come from the full corpus so single-image runs are comparable
                use_ref = ref if ds is base_ds else None
                pt.metrics = analyze(res.model, pr, base_ds, sd, reference=use_ref)
                pt.collapse_step = res.collapse_step
                lm = res.log.column("l_mae")
                pt.final_l_mae = float(np.nanmean(lm[-50:])) if lm.size else None
                logs[f"{pr.name}_s{sd}"] = res.log
                rows.extend(pt.metrics)
                if pdir is not None:
                    emit_report(pdir, metrics=pt.metrics)
            except Exception as exc:  # noqa: BLE001 - a failed point must not stop the sweep
                pt.status = "failed"
                pt.error = f"{type(exc).__name__}: {exc}"
                log.warning("sweep point %s seed %d failed: %s\n%s", pr.name, sd, exc, traceback.format_exc())
            points.append(pt)
    summary = _summarize(kind, presets, points, seeds)
    if ref is not None:
        summary["reference"] = ref.provenance
    if out is not None:
        os.makedirs(out, exist_ok=True)
        emit_report(out, logs=logs, metrics=rows, svg=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (out / "points.json").write_text(json.dumps(
            [{"preset": p.preset, "seed": p.seed, "status": p.status, "error": p.error,
              "collapse_step": p.collapse_step, "final_l_mae": p.final_l_mae} for p in points], indent=2))
    return SweepReport(kind, points, summary)
