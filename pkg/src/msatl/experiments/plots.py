from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..metrics import METRICS  # noqa: E402

TITLES = {"iou": "IoU", "dice": "Dice", "f2": "F2", "f05": "F0.5"}


class SweepCSVError(ValueError):
    pass


def read_sweep_csv(path) -> dict[str, dict[str, list[tuple[float, float, float]]]]:
    """experiment -> metric -> [(fraction, mean, std)] sorted by fraction."""
    path = Path(path)
    out: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"fraction", "metric", "mean", "std"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise SweepCSVError(f"{path}: header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                metric = row["metric"]
                if metric not in METRICS:
                    raise ValueError(f"unknown metric {metric!r}")
                values = (float(row["fraction"]), float(row["mean"]), float(row["std"]))
            except (TypeError, ValueError) as exc:
                raise SweepCSVError(f"{path}: malformed row {lineno}: {exc}") from exc
            name = row.get("experiment") or path.stem
            out[name][metric].append(values)
    for metrics in out.values():
        for series in metrics.values():
            series.sort()
    return {k: dict(v) for k, v in out.items()}


def load_series(sweep_csvs: Sequence) -> dict:
    series = {}
    for p in sweep_csvs:
        for name, metrics in read_sweep_csv(p).items():
            key = name
            k = 2
            while key in series:
                key = f"{name} ({k})"
                k += 1
            series[key] = metrics
    if not series:
        raise SweepCSVError("no sweep data to plot")
    return series


def trend_figure(series: dict):
    """One panel per metric, one line (mean with std band) per experiment."""
    fractions = sorted({f for m in series.values() for s in m.values() for f, _, _ in s})

    fig, axes = plt.subplots(1, len(METRICS), figsize=(4.2 * len(METRICS), 3.6), squeeze=False)
    for ax, metric in zip(axes[0], METRICS):
        for name, metrics in series.items():
            pts = metrics.get(metric, [])
            if not pts:
                continue
            xs = [p[0] for p in pts]
            means = [p[1] for p in pts]
            lo = [p[1] - p[2] for p in pts]
            hi = [p[1] + p[2] for p in pts]
            (line,) = ax.plot(xs, means, marker="o", label=name)
            ax.fill_between(xs, lo, hi, color=line.get_color(), alpha=0.2)
        ax.set_xticks(fractions)
        ax.set_xticklabels([f"{100 * f:.0f}%" for f in fractions], rotation=45)
        ax.set_title(TITLES[metric])
        ax.set_xlabel("unlabeled target fraction")
        ax.set_ylabel("score (%)")
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize="small")
    fig.tight_layout()
    return fig


def plot_trends(sweep_csvs: Sequence, out, formats: Sequence[str] = ("svg", "png")) -> list[Path]:
    fig = trend_figure(load_series(sweep_csvs))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        target = out.with_suffix(f".{fmt}")
        fig.savefig(target)
        written.append(target)
    plt.close(fig)
    return written
