"""CSV metrics and optional SVG line plots."""
from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .train import MetricsLog

METRIC_COLUMNS = ("experiment", "layer", "head", "metric", "value", "seed")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_metrics_csv(path, rows) -> Path:
    """Rows sorted by (experiment, metric, seed, layer, head) for a deterministic file."""
    def key(r):
        return (str(r["experiment"]), str(r["metric"]), str(r["seed"]), str(r["layer"]).zfill(4), str(r["head"]).zfill(4))

    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in sorted(rows, key=key):
            w.writerow([_cell(r[c]) for c in METRIC_COLUMNS])
    return path


def _parse(col: str, v: str):
    if col == "value":
        return float(v)
    if col in ("layer", "head", "seed"):
        try:
            return int(v)
        except ValueError:
            return v
    return v


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [{c: _parse(c, v) for c, v in zip(header, rec)} for rec in reader]


def _svg_lines(path, series: dict, xlabel: str, ylabel: str, title: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, marker="o" if len(xs) < 20 else None, label=str(label))
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if series:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def emit_report(out_dir, logs: dict[str, MetricsLog] | None = None, metrics: list[dict] | None = None,
                svg: bool = False) -> list[Path]:
    """Write ``metrics.csv``, one ``train_<name>.csv`` per log and, optionally, SVG curves."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    written = [write_metrics_csv(out / "metrics.csv", metrics or [])]
    for name, log in sorted((logs or {}).items()):
        p = out / f"train_{name}.csv"
        log.write_csv(p)
        written.append(p)
    if not svg:
        return written
    if logs:
        series = {n: (log.column("step"), log.column("total")) for n, log in logs.items()}
        written.append(_svg_lines(out / "loss.svg", series, "step", "total loss", "training loss"))
    by_metric: dict[str, dict] = {}
    for r in metrics or []:
        if r["head"] != "mean":
            continue
        by_metric.setdefault(r["metric"], {}).setdefault(f"{r['experiment']} s{r['seed']}", []).append(
            (r["layer"], r["value"]))
    for metric, groups in sorted(by_metric.items()):
        series = {k: tuple(zip(*sorted(v))) for k, v in groups.items()}
        written.append(_svg_lines(out / f"{metric}.svg", series, "layer", metric, metric))
    return written
