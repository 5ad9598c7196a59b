"""The training loop: one or two masked views through a shared model, AdamW,
periodic collapse checks on a fixed evaluation batch, and checkpoints."""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import altdecoders, checkpoint, masking, objectives
from .. import diffcore as dc
from ..analysis import collapse_metric
from ..vit import MaskedAutoencoder, patchify
from .data import ImageDataset, load_dataset, tiny_corpus
from .optim import AdamW, lr_at
from .presets import ExperimentPreset

# RNG streams derived from the run seed
STREAM_MASKS, STREAM_BATCHES, STREAM_EVAL = 1, 2, 3
LOG_COLUMNS = ("step", "l_mae", "l_cross", "l_in", "total", "lr", "collapse", "wall_time")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, checkpoint_path, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}; last good checkpoint: {checkpoint_path}")
        self.step = step
        self.checkpoint = checkpoint_path


@dataclass
class MetricsLog:
    """Append-only per-step rows. ``None`` marks an absent value."""

    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        if self.rows and row["step"] < self.rows[-1]["step"]:
            raise ValueError(f"step {row['step']} goes backwards")
        self.rows.append({c: row.get(c) for c in LOG_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=np.float64)

    def replay_key(self) -> list[tuple]:
        """Rows without wall time; equal for reruns of the same (preset, seed)."""
        return [tuple(r[c] for c in LOG_COLUMNS if c != "wall_time") for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow(["" if r[c] is None else (str(int(r[c])) if c == "step" else repr(float(r[c])))
                            for c in LOG_COLUMNS])

    @classmethod
    def read_csv(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != LOG_COLUMNS:
                raise ValueError(f"unexpected metrics header {header}")
            for rec in reader:
                row = {c: (None if v == "" else (int(v) if c == "step" else float(v))) for c, v in zip(header, rec)}
                log.append(**row)
        return log

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class TrainResult:
    model: MaskedAutoencoder
    log: MetricsLog
    checkpoint: Path | None
    collapse_step: int | None
    collapse_initial: float
    steps_run: int
    dataset: ImageDataset | None = None


def resolve_dataset(preset: ExperimentPreset) -> ImageDataset:
    ref = preset.data
    ds = tiny_corpus() if not ref.path else load_dataset(ref.path, ref.format)
    if ref.indices is not None:
        return ds.subset(ref.indices)
    if ref.n_images is not None and ref.n_images < len(ds):
        return ds.subset(np.arange(ref.n_images))
    return ds


def _sub_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(stream,)).generate_state(1, np.uint64)[0])


def eval_batch(preset: ExperimentPreset, ds: ImageDataset, seed: int):
    """Fixed images and one fixed mask per image for the collapse check."""
    cfg = preset.model
    rng = np.random.default_rng(_sub_seed(seed, STREAM_EVAL))
    k = min(preset.collapse_images, len(ds))
    idx = np.sort(rng.choice(len(ds), size=k, replace=False))
    x = patchify(ds.images[idx], cfg.patch)
    ratio = 0.0 if preset.ae_mode else preset.mask_ratio
    masks = masking.sample_masks(len(idx), cfg.n, ratio, masking.RngState(seed, STREAM_EVAL))
    return x, masks


def probe_collapse(model: MaskedAutoencoder, x, masks, initial=None):
    with dc.no_grad():
        out = model(x, masks)
        v = model.project(out)
    return collapse_metric(v.data, initial, min_batch=2)


def model_arrays(model: MaskedAutoencoder, prefix: str = "model.") -> dict:
    return {prefix + k: v for k, v in model.state_dict().items()}


def save_checkpoint(path, model, opt=None, step: int = 0, extra: dict | None = None) -> Path:
    arrays = model_arrays(model)
    if opt is not None:
        arrays.update({"opt." + k: v for k, v in opt.state().items()})
    arrays["meta.step"] = np.array([step], dtype=np.int64)
    if extra:
        arrays.update(extra)
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    checkpoint.save(tmp, arrays)
    os.replace(tmp, path)
    return path


def load_model(path, cfg) -> MaskedAutoencoder:
    arrays = checkpoint.load(path)
    model = MaskedAutoencoder(cfg, seed=0)
    state = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model


def _loss_step(model, preset: ExperimentPreset, images: np.ndarray, rng: masking.RngState):
    cfg = preset.model
    x = patchify(images, cfg.patch)
    B = x.shape[0]
    if preset.ae_mode:
        spec = altdecoders.BlockTargetSpec(cfg.ae_block or cfg.patch, cfg.patch)
        targets, valid = altdecoders.ae_block_targets(images, spec)
        if preset.normalize_target:
            targets = altdecoders.normalize_block_targets(targets, valid)
        out = model(x, np.zeros((B, cfg.n), dtype=bool))
        loss = altdecoders.loss_ae(out.pred, targets.astype(np.float32), valid)
        return loss, {"l_mae": loss}
    use_mae, use_cross, use_in = preset.flags
    n_views = 2 if use_cross else 1
    masks = [masking.sample_masks(B, cfg.n, preset.mask_ratio, rng) for _ in range(n_views)]
    xx = np.concatenate([x] * n_views) if n_views > 1 else x
    out = model(xx, np.concatenate(masks))
    v = model.project(out) if (use_cross or use_in) else None
    views = []
    for k in range(n_views):
        sl = slice(k * B, (k + 1) * B)
        views.append((out.pred[sl], None if v is None else v[sl], masks[k]))
    br = objectives.total_loss(preset.flags, x, views, preset.loss_weights, preset.normalize_target,
                               preset.normalize_pred, preset.in_standardize, preset.reduction)
    return br.total, {"l_mae": br.l_mae, "l_cross": br.l_cross, "l_in": br.l_in}


def _f(t):
    return None if t is None else float(t.data)


def train(preset: ExperimentPreset, seed: int = 0, out_dir=None, dataset: ImageDataset | None = None,
          steps: int | None = None, progress=None) -> TrainResult:
    """Train ``preset`` with ``seed``; returns the model and its MetricsLog.

    ``steps`` truncates the run without changing the schedule. With
    ``out_dir`` the preset, metrics CSV and checkpoints are written there.
    """
    preset.validate()
    ds = dataset if dataset is not None else resolve_dataset(preset)
    cfg = preset.model
    total = preset.steps if steps is None else min(steps, preset.steps)
    model = MaskedAutoencoder(cfg, seed=seed)
    o = preset.optimizer
    opt = AdamW(model.named_parameters(), lr=preset.schedule.lr, betas=tuple(o["betas"]),
                eps=o["eps"], weight_decay=o["weight_decay"])
    mask_rng = masking.RngState(seed, STREAM_MASKS)
    batches = ds.batches(preset.schedule.batch_size, _sub_seed(seed, STREAM_BATCHES))
    ex, em = eval_batch(preset, ds, seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        os.makedirs(out, exist_ok=True)
        preset.save(out / "preset.json")
    ck_extra = {"meta.eval_mask": checkpoint.Bits(em.ravel()), "meta.seed": np.array([seed], dtype=np.int64)}
    last_ck = None
    if out is not None:
        last_ck = save_checkpoint(out / "checkpoints" / "step_0.ckpt", model, opt, 0, ck_extra)

    log = MetricsLog()
    t0 = time.perf_counter()
    initial = probe_collapse(model, ex, em).aggregate
    collapse_step = None
    step = 0
    for step in range(1, total + 1):
        idx = next(batches)
        lr = lr_at(step - 1, preset.schedule)
        opt.zero_grad()
        loss, parts = _loss_step(model, preset, ds.images[idx], mask_rng)
        lval = float(loss.data)
        if not math.isfinite(lval):
            raise DivergenceError(step, last_ck)
        loss.backward()
        opt.step(lr)
        if any(not np.all(np.isfinite(p.data)) for p in model.parameters()):
            raise DivergenceError(step, last_ck, "non-finite parameters")
        coll = None
        if preset.collapse_every and (step % preset.collapse_every == 0 or step == total):
            rep = probe_collapse(model, ex, em, initial)
            coll = rep.aggregate
            if rep.collapsed and collapse_step is None:
                collapse_step = step
        if step % preset.log_every == 0 or coll is not None or step == total:
            log.append(step=step, l_mae=_f(parts.get("l_mae")), l_cross=_f(parts.get("l_cross")),
                       l_in=_f(parts.get("l_in")), total=lval, lr=lr, collapse=coll,
                       wall_time=time.perf_counter() - t0)
        if out is not None and preset.checkpoint_every and step % preset.checkpoint_every == 0:
            last_ck = save_checkpoint(out / "checkpoints" / f"step_{step}.ckpt", model, opt, step, ck_extra)
        if progress is not None:
            progress(step, lval)
        if collapse_step is not None and preset.stop_on_collapse:
            break
    if out is not None:
        last_ck = save_checkpoint(out / "checkpoints" / "final.ckpt", model, opt, step, ck_extra)
        log.write_csv(out / "metrics.csv")
    return TrainResult(model, log, last_ck, collapse_step, initial, step, ds)
