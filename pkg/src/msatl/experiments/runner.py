from __future__ import annotations

import csv
import logging
import platform
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch

from .. import __version__
from ..data.loading import load_domain
from ..data.splits import partition_labels, split_target
from ..data.types import DomainDataset, Role, SplitSpec
from ..metrics import METRICS, MetricReport, evaluate
from ..network import build_model, count_parameters, save_checkpoint
from ..training import TrainHistory, train
from .config import ExperimentConfig, dump_config
from .synthetic import gen_synthetic

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    sources: list[DomainDataset]        # active sources, re-indexed 1..k
    target_train: DomainDataset         # with labeled/unlabeled partition applied
    target_val: DomainDataset
    target_test: DomainDataset


def load_all_domains(cfg: ExperimentConfig) -> tuple[DomainDataset, list[DomainDataset]]:
    """Target and every configured source (ordered by source index)."""
    if cfg.synthetic is not None:
        domains = gen_synthetic(cfg.synthetic, cfg.seed)
        return domains[0], domains[1:]
    target, sources = None, {}
    for entry in cfg.domains:
        ds = load_domain(entry.path, entry.layout, entry.role, entry.name, cfg.preprocess)
        if entry.role.is_target:
            target = ds
        else:
            sources[entry.role.index] = ds
    return target, [sources[i] for i in sorted(sources)]


def prepare_data(cfg: ExperimentConfig, unlabeled_frac=None, domains=None) -> PreparedData:
    target, all_sources = domains if domains is not None else load_all_domains(cfg)
    train_ds, val_ds, test_ds = split_target(target, cfg.split)
    frac = cfg.split.unlabeled_frac if unlabeled_frac is None else unlabeled_frac
    train_ds = partition_labels(train_ds, frac, cfg.split.seed)
    active = [all_sources[i - 1].with_role(Role.source(k))
              for k, i in enumerate(cfg.active_sources(), start=1)]
    return PreparedData(active, train_ds, val_ds, test_ds)


def write_split_listing(data: PreparedData, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "partition", "sample_id", "labeled"])
        for k, src in enumerate(data.sources, start=1):
            for s in src.samples:
                w.writerow([src.name, f"source{k}", s.sample_id, int(s.labeled)])
        for part, ds in (("train", data.target_train), ("val", data.target_val), ("test", data.target_test)):
            for s in ds.samples:
                w.writerow([ds.name, part, s.sample_id, int(s.labeled)])
    return path


@dataclass
class RunResult:
    output_dir: Path
    report: MetricReport
    history: TrainHistory
    n_parameters: int


def run(config: ExperimentConfig, unlabeled_frac=None, output_dir=None, domains=None) -> RunResult:
    """Prepare data, train in the configured mode, test, and write every artifact."""
    cfg = config.resolved()
    if unlabeled_frac is not None:
        cfg.split = SplitSpec(cfg.split.train_frac, cfg.split.val_frac, cfg.split.test_frac,
                              unlabeled_frac, cfg.split.seed)
    out = Path(output_dir or cfg.output_dir)
    cfg.output_dir = str(out)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg, domains=domains)
    write_split_listing(data, out / "splits.csv")

    model = build_model(cfg.net, cfg.seed)
    started = time.time()

    def on_epoch(record):
        if record.epoch == cfg.train.epochs:
            save_checkpoint(out / "last.pt", model, cfg.seed, {"epoch": record.epoch})

    model, history = train(model, data.sources, data.target_train, data.target_val, cfg.train, on_epoch)
    save_checkpoint(out / "best.pt", model, cfg.seed, {"epoch": history.best_epoch})
    history.to_csv(out / "history.csv")
    report = evaluate(model, data.target_test)
    report.to_csv(out / "metrics.csv")
    n_params = count_parameters(model)
    dump_config(cfg, out / "manifest.yaml", {
        "version": __version__,
        "n_parameters": n_params,
        "best_epoch": history.best_epoch,
        "n_target_train": len(data.target_train),
        "n_target_unlabeled": data.target_train.n_unlabeled,
        "test_dice": report.mean("dice"),
        "torch": str(torch.__version__),
        "python": platform.python_version(),
        "wall_time_s": round(time.time() - started, 3),
    })
    log.info("%s: test %s", out, {m: report.format(m) for m in METRICS})
    return RunResult(out, report, history, n_params)


def evaluate_checkpoint(config: ExperimentConfig, checkpoint, out_csv=None) -> MetricReport:
    from ..network import load_checkpoint

    cfg = config.resolved()
    data = prepare_data(cfg)
    model, _ = load_checkpoint(checkpoint)
    report = evaluate(model, data.target_test)
    if out_csv is not None:
        report.to_csv(out_csv)
    return report


# --------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ["experiment", "fraction", "metric", "mean", "std"]
PAIR_COLUMNS = ["group", "alpha", "lambda", "fraction", "metric", "mean", "std"]


def _check_fractions(fractions: Sequence[float]) -> list[float]:
    fr = [float(f) for f in fractions]
    for f in fr:
        if not (0.0 <= f <= 0.9 + 1e-12):
            raise ValueError(f"unlabeled fraction {f} outside [0, 0.9]")
    return sorted(set(fr))


def sweep_unlabeled(config: ExperimentConfig, fractions: Optional[Sequence[float]] = None,
                    experiment: Optional[str] = None) -> dict[float, MetricReport]:
    """One run per unlabeled fraction; writes ``sweep.csv`` in long format."""
    fractions = _check_fractions(fractions if fractions is not None else config.sweep.fractions)
    out = Path(config.output_dir)
    domains = load_all_domains(config.resolved())
    results = {}
    for f in fractions:
        res = run(config, unlabeled_frac=f, output_dir=out / f"frac_{f:.2f}", domains=domains)
        results[f] = res.report
    name = experiment or config.mode
    write_sweep_csv(out / "sweep.csv", name, results)
    return results


def write_sweep_csv(path, experiment: str, results: dict[float, MetricReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for f in sorted(results):
            for m in METRICS:
                mean, std = results[f].aggregate[m]
                w.writerow([experiment, f"{f:.2f}", m, f"{mean:.3f}", f"{std:.3f}"])
    return path


def sweep_alpha_lambda(config: ExperimentConfig, pairs: Optional[Sequence[tuple[float, float]]] = None,
                       fractions: Optional[Sequence[float]] = None) -> dict[tuple[float, float], dict[float, MetricReport]]:
    """One run per (alpha, lambda) pair and fraction; writes ``alpha_lambda.csv``."""
    pairs = [(float(a), float(b)) for a, b in (pairs if pairs is not None else config.sweep.pairs)]
    if not pairs:
        raise ValueError("at least one (alpha, lambda) pair is required")
    for a, b in pairs:
        if a < 0 or b < 0:
            raise ValueError(f"alpha and lambda must be non-negative, got ({a}, {b})")
    fractions = _check_fractions(fractions if fractions is not None else config.sweep.fractions)
    out = Path(config.output_dir)
    domains = load_all_domains(config.resolved())
    table = {}
    rows = []
    for group, (a, b) in enumerate(pairs, start=1):
        cfg = ExperimentConfig.from_dict(config.to_dict())
        cfg.train.alpha, cfg.train.lambda_ = a, b
        table[(a, b)] = {}
        for f in fractions:
            res = run(cfg, unlabeled_frac=f, output_dir=out / f"group{group}" / f"frac_{f:.2f}", domains=domains)
            table[(a, b)][f] = res.report
            for m in METRICS:
                mean, std = res.report.aggregate[m]
                rows.append([f"#{group}", a, b, f"{f:.2f}", m, f"{mean:.3f}", f"{std:.3f}"])
    with (out / "alpha_lambda.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PAIR_COLUMNS)
        w.writerows(rows)
    return table
