"""Experiment configuration files.

A config is one YAML document::

    seed: 0
    mode: multi-source-adversarial   # see MODES
    source_index: 1                  # used by single-source-adversarial
    output_dir: runs/busi-benign
    domains:                         # real data ...
      - {name: busi-benign, role: target, path: data/benign,
         layout: {kind: paired-mask-files, mask_suffix: _mask}}
      - {name: ddti, role: source1, path: data/ddti,
         layout: {kind: xml-contours}}
    synthetic: {...}                 # ... or a SyntheticSpec instead of domains
    preprocess: {size: [256, 256], crop_threshold: 0.05, crop_margin: 0}
    net: {base_width: 32, norm_groups: 8}
    train: {alpha: 1, lambda: 1, epochs: 100, n_sb: 16, learning_rate: 0.001}
    split: {train_frac: 0.8, val_frac: 0.1, test_frac: 0.1, unlabeled_frac: 0.0, seed: 0}
    sweep: {fractions: [0.0, 0.1, ...], pairs: [[1, 1], [2, 3]]}

``net.n_sources`` and ``net.grl_lambda`` are derived from the mode and from
``train.lambda``; they never need to be set by hand.  The environment
variable ``MSATL_OUTPUT`` overrides ``output_dir``.
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

import yaml

from ..data.loading import LayoutDescriptor, Preprocess
from ..data.types import Role, SplitSpec
from ..network import NetConfig
from ..training import TrainConfig
from .synthetic import SyntheticSpec

MODES = (
    "multi-source-adversarial",
    "single-source-adversarial",
    "multi-task-no-adversarial",
    "target-only",
    "no-independence",
)

OUTPUT_ENV = "MSATL_OUTPUT"

# Table-8 style (alpha, lambda) groups
DEFAULT_PAIRS = [(1, 1), (2, 3), (1, 4), (3, 1), (5, 3), (1, 5), (5, 2), (2, 1)]
DEFAULT_FRACTIONS = [round(0.1 * k, 1) for k in range(10)]


class ConfigError(ValueError):
    pass


@dataclass
class DomainEntry:
    name: str
    role: Role
    path: str
    layout: LayoutDescriptor = field(default_factory=LayoutDescriptor)

    @classmethod
    def from_dict(cls, d) -> "DomainEntry":
        d = dict(d)
        try:
            return cls(
                name=d.get("name") or Path(d["path"]).name,
                role=Role.parse(d["role"]),
                path=str(d["path"]),
                layout=LayoutDescriptor.from_dict(d.get("layout", {})),
            )
        except KeyError as exc:
            raise ConfigError(f"domain entry missing {exc}") from exc

    def to_dict(self) -> dict:
        return {"name": self.name, "role": str(self.role), "path": self.path, "layout": asdict(self.layout)}


@dataclass
class SweepSpec:
    fractions: list[float] = field(default_factory=lambda: [0.0])
    pairs: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.fractions = [float(f) for f in self.fractions]
        self.pairs = [(float(a), float(b)) for a, b in self.pairs]


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "multi-source-adversarial"
    source_index: int = 1
    output_dir: str = "runs/default"
    domains: list[DomainEntry] = field(default_factory=list)
    synthetic: Optional[SyntheticSpec] = None
    preprocess: Preprocess = field(default_factory=Preprocess)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def validate(self) -> "ExperimentConfig":
        mode = self.mode
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if bool(self.domains) == (self.synthetic is not None):
            raise ConfigError("give exactly one of 'domains' or 'synthetic'")
        if self.domains:
            roles = [d.role for d in self.domains]
            n_targets = sum(r.is_target for r in roles)
            if n_targets != 1:
                raise ConfigError(f"exactly one target domain required, found {n_targets}")
            src = sorted(r.index for r in roles if r.is_source)
            if src != list(range(1, len(src) + 1)):
                raise ConfigError(f"source indices must be 1..N without gaps, got {src}")
        n = self.n_available_sources
        if mode != "target-only" and n < 1:
            raise ConfigError(f"mode {mode} needs at least one source domain")
        if mode == "single-source-adversarial" and not 1 <= self.source_index <= n:
            raise ConfigError(f"source_index {self.source_index} out of range 1..{n}")
        return self

    @property
    def n_available_sources(self) -> int:
        if self.synthetic is not None:
            return self.synthetic.n_domains - 1
        return sum(1 for d in self.domains if d.role.is_source)

    def active_sources(self) -> list[int]:
        if self.mode == "target-only":
            return []
        if self.mode == "single-source-adversarial":
            return [self.source_index]
        return list(range(1, self.n_available_sources + 1))

    def resolved(self) -> "ExperimentConfig":
        """Copy with mode-derived settings filled in."""
        self.validate()
        cfg = copy.deepcopy(self)
        t, n = cfg.train, cfg.net
        t.seed = cfg.seed
        t.sampler = "independent"
        t.adversarial = True
        if cfg.mode == "target-only":
            t.sampler, t.adversarial, t.lambda_ = "target-only", False, 0.0
        elif cfg.mode == "multi-task-no-adversarial":
            t.lambda_ = 0.0
        elif cfg.mode == "no-independence":
            t.sampler = "mixed"
        n.n_sources = max(len(cfg.active_sources()), 1)
        n.grl_lambda = t.lambda_
        return cfg

    # ------------------------------------------------------------------
    # (de)serialization

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        d.pop("manifest", None)
        mode = str(d.get("mode", "multi-source-adversarial"))
        source_index = int(d.get("source_index", 1))
        # accept "single-source-adversarial(2)"
        if mode.startswith("single-source-adversarial(") and mode.endswith(")"):
            source_index = int(mode[len("single-source-adversarial("):-1])
            mode = "single-source-adversarial"
        unknown = set(d) - {"seed", "mode", "source_index", "output_dir", "domains", "synthetic",
                            "preprocess", "net", "train", "split", "sweep"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        prep = dict(d.get("preprocess") or {})
        if prep.get("size") is not None:
            prep["size"] = tuple(prep["size"])
        split = dict(d.get("split") or {})
        for k in ("train_frac", "val_frac", "test_frac", "unlabeled_frac"):
            if k in split:
                split[k] = Fraction(str(split[k]))
        try:
            cfg = cls(
                seed=int(d.get("seed", 0)),
                mode=mode,
                source_index=source_index,
                output_dir=str(d.get("output_dir", "runs/default")),
                domains=[DomainEntry.from_dict(x) for x in d.get("domains") or []],
                synthetic=SyntheticSpec.from_dict(d["synthetic"]) if d.get("synthetic") else None,
                preprocess=Preprocess(**prep),
                net=NetConfig.from_dict(d.get("net") or {}),
                train=TrainConfig.from_dict(d.get("train") or {}),
                split=SplitSpec(**split),
                sweep=SweepSpec(**(d.get("sweep") or {})),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def to_dict(self) -> dict[str, Any]:
        train = asdict(self.train)
        train["lambda"] = train.pop("lambda_")
        prep = asdict(self.preprocess)
        if prep["size"] is not None:
            prep["size"] = list(prep["size"])
        net = asdict(self.net)
        net["classifier_hidden"] = list(net["classifier_hidden"])
        split = {k: (str(v) if isinstance(v, Fraction) else v) for k, v in asdict(self.split).items()}
        out = {
            "seed": self.seed,
            "mode": self.mode,
            "source_index": self.source_index,
            "output_dir": self.output_dir,
            "preprocess": prep,
            "net": net,
            "train": train,
            "split": split,
            "sweep": {"fractions": list(self.sweep.fractions), "pairs": [list(p) for p in self.sweep.pairs]},
        }
        if self.domains:
            out["domains"] = [dm.to_dict() for dm in self.domains]
        if self.synthetic is not None:
            syn = self.synthetic.to_dict()
            for st in syn["styles"]:
                st["size_range"] = list(st["size_range"])
            out["synthetic"] = syn
        return out


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    cfg = ExperimentConfig.from_dict(data)
    if seed is not None:
        cfg.seed = seed
    env = os.environ.get(OUTPUT_ENV)
    if env:
        cfg.output_dir = env
    if out is not None:
        cfg.output_dir = out
    return cfg


def dump_config(cfg: ExperimentConfig, path, extra: Optional[dict] = None) -> Path:
    data = cfg.to_dict()
    if extra:
        data["manifest"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path
