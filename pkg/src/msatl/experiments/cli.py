"""Command line entry point: ``msatl <verb> --config cfg.yaml [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from ..metrics import METRICS
from .config import ConfigError, ExperimentConfig, load_config
from .synthetic import SyntheticSpec, gen_synthetic

log = logging.getLogger("msatl")


def _global_flags(required_config: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", required=required_config, help="experiment YAML file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed, out=args.out)


def cmd_prepare(args):
    from .runner import prepare_data, write_split_listing

    cfg = _config(args)
    data = prepare_data(cfg.resolved())
    out = Path(cfg.output_dir)
    write_split_listing(data, out / "splits.csv")
    summary = {
        "sources": {ds.name: len(ds) for ds in data.sources},
        "target_train": len(data.target_train),
        "target_train_unlabeled": data.target_train.n_unlabeled,
        "target_val": len(data.target_val),
        "target_test": len(data.target_test),
    }
    (out / "data_summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
    print(yaml.safe_dump(summary, sort_keys=False), end="")


def cmd_train(args):
    from .runner import run

    res = run(_config(args))
    for m in METRICS:
        print(f"{m}: {res.report.format(m)}")
    print(f"outputs in {res.output_dir}")


def cmd_evaluate(args):
    from .runner import evaluate_checkpoint

    cfg = _config(args)
    ckpt = Path(args.checkpoint or Path(cfg.output_dir) / "best.pt")
    report = evaluate_checkpoint(cfg, ckpt, Path(cfg.output_dir) / "metrics.csv")
    for m in METRICS:
        print(f"{m}: {report.format(m)}")


def cmd_sweep(args):
    from .runner import sweep_alpha_lambda, sweep_unlabeled

    cfg = _config(args)
    fractions = args.fractions
    if args.kind == "alpha-lambda":
        sweep_alpha_lambda(cfg, fractions=fractions)
        print(Path(cfg.output_dir) / "alpha_lambda.csv")
    else:
        sweep_unlabeled(cfg, fractions=fractions)
        print(Path(cfg.output_dir) / "sweep.csv")


def write_domain_dir(ds, root: Path):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / "images" / f"{s.sample_id}.png")
        Image.fromarray(s.mask * 255).save(root / "masks" / f"{s.sample_id}.png")


def cmd_synth(args):
    if args.config:
        cfg = _config(args)
        spec = cfg.synthetic or SyntheticSpec()
        seed, out = cfg.seed, Path(cfg.output_dir)
    else:
        spec = SyntheticSpec(samples_per_domain=args.samples, image_size=args.size)
        seed, out = args.seed or 0, Path(args.out or "synthetic")
    domains = gen_synthetic(spec, seed)
    entries = []
    for ds in domains:
        write_domain_dir(ds, out / ds.name)
        entries.append({"name": ds.name, "role": str(ds.role), "path": str(out / ds.name),
                        "layout": {"kind": "paired-mask-files"}})
    (out / "domains.yaml").write_text(yaml.safe_dump({"domains": entries}, sort_keys=False))
    print(f"wrote {len(domains)} domains to {out}")


def cmd_plot(args):
    from .plots import plot_trends

    out = args.out or "trends"
    for p in plot_trends(args.csv, out):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msatl", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    cfg_flags = _global_flags(required_config=True)
    opt_flags = _global_flags(required_config=False)

    p = sub.add_parser("prepare", parents=[cfg_flags], help="load, split and list the datasets")
    p.set_defaults(func=cmd_prepare)
    p = sub.add_parser("train", parents=[cfg_flags], help="train and test one configuration")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("evaluate", parents=[cfg_flags], help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("sweep", parents=[cfg_flags], help="unlabeled-fraction or alpha/lambda sweep")
    p.add_argument("--kind", choices=("unlabeled", "alpha-lambda"), default="unlabeled")
    p.add_argument("--fractions", type=float, nargs="+", default=None)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("synth", parents=[opt_flags], help="write synthetic domains as image/mask folders")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("plot", parents=[opt_flags], help="trend plots from sweep CSV files")
    p.add_argument("csv", nargs="+")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
