"""Composite loss and the training loop.

The adversarial term is realized through the gradient reversal layer: one
backward pass of ``source_seg + alpha * target_seg + adversarial`` trains the
domain classifiers to minimize domain cross-entropy while the encoders
receive ``-lambda`` times that gradient.  ``LossTerms.total`` reports the
encoder-view objective ``source_seg + alpha * target_seg - lambda * adversarial``.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F

from .data.types import DomainDataset
from .metrics import MetricReport, evaluate
from .network import MultiSourceNet
from .sampling import (EpochPlan, MaterializedSubBatch, materialize, plan_epoch,
                       plan_epoch_mixed, plan_target_epoch)

log = logging.getLogger(__name__)

SAMPLERS = ("independent", "mixed", "target-only")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lambda_: float = 1.0
    epochs: int = 100
    n_sb: int = 16
    learning_rate: float = 1e-3
    # linear decay to this rate over the run; None keeps the rate constant
    final_learning_rate: Optional[float] = None
    seed: int = 0
    optimizer: str = "rmsprop"
    target_loss_per_subbatch: bool = False
    adversarial: bool = True
    sampler: str = "independent"

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_ < 0:
            raise ValueError("alpha and lambda must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.optimizer != "rmsprop":
            raise ValueError("only the RMSprop optimizer is supported")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def learning_rate_at(self, epoch: int) -> float:
        if self.final_learning_rate is None or self.epochs == 1:
            return self.learning_rate
        t = epoch / (self.epochs - 1)
        return self.learning_rate + (self.final_learning_rate - self.learning_rate) * t


@dataclass
class LossTerms:
    source_seg: torch.Tensor
    target_seg: torch.Tensor
    adversarial: torch.Tensor
    alpha: float = 1.0
    lambda_: float = 1.0

    @property
    def total(self) -> torch.Tensor:
        return self.source_seg + self.alpha * self.target_seg - self.lambda_ * self.adversarial

    def as_floats(self) -> dict[str, float]:
        return {
            "source_seg": float(self.source_seg.detach()),
            "target_seg": float(self.target_seg.detach()),
            "adversarial": float(self.adversarial.detach()),
            "total": float(self.total.detach()),
        }


def domain_loss(logit: torch.Tensor, domain_label) -> torch.Tensor:
    """Per-item binary cross-entropy with logits, ``max(x,0) - x*y + log(1+exp(-|x|))``."""
    y = torch.as_tensor(domain_label, dtype=logit.dtype)
    return logit.clamp(min=0) - logit * y + torch.log1p(torch.exp(-logit.abs()))


def segmentation_loss(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Per-image pixel-mean cross-entropy, shape (k,)."""
    return F.cross_entropy(logits, masks, reduction="none").mean(dim=(1, 2))


@dataclass(frozen=True)
class Origin:
    kind: str  # "source", "target-labeled", "target-unlabeled"
    index: int = 0

    @classmethod
    def source(cls, i: int) -> "Origin":
        return cls("source", i)

    @classmethod
    def labeled_target(cls) -> "Origin":
        return cls("target-labeled")

    @classmethod
    def unlabeled_target(cls) -> "Origin":
        return cls("target-unlabeled")


def sample_loss(model: MultiSourceNet, x: torch.Tensor, origin: Origin, mask: Optional[torch.Tensor] = None,
                alpha: float = 1.0, lambda_: float = 1.0, adversarial: bool = True) -> LossTerms:
    """Loss contribution of one image, evaluated on its own."""
    if x.dim() == 2:
        x = x.unsqueeze(0)
    x = x.unsqueeze(0)
    zero = x.new_zeros(())
    if mask is not None and mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if origin.kind == "source":
        if mask is None:
            raise ValueError("source sample without mask")
        if not 1 <= origin.index <= model.n_sources:
            raise ValueError(f"unknown source index {origin.index}")
        pack = model.encode(origin.index, x)
        seg = segmentation_loss(model.decode_source(origin.index, pack), mask).sum()
        adv = domain_loss(model.classify_domain(origin.index, pack.bottleneck), 1.0).sum() if adversarial else zero
        return LossTerms(seg, zero, adv, alpha, lambda_)
    if origin.kind == "target-labeled" and mask is None:
        raise ValueError("labeled target sample without mask")
    if origin.kind == "target-unlabeled" and mask is not None:
        raise ValueError("unlabeled target sample must not carry a mask")
    if origin.kind not in ("target-labeled", "target-unlabeled"):
        raise ValueError(f"unknown origin {origin.kind!r}")
    packs = [model.encode(i, x) for i in range(1, model.n_sources + 1)]
    adv = zero
    if adversarial:
        for i, pack in enumerate(packs, start=1):
            adv = adv + domain_loss(model.classify_domain(i, pack.bottleneck), 0.0).sum()
    tgt = zero
    if origin.kind == "target-labeled":
        tgt = segmentation_loss(model.decode_target_fused(packs), mask).sum()
    return LossTerms(zero, tgt, adv, alpha, lambda_)


def batch_loss(model: MultiSourceNet, subs: Sequence[MaterializedSubBatch], alpha: float = 1.0,
               lambda_: float = 1.0, adversarial: bool = True,
               target_loss_per_subbatch: bool = False) -> tuple[LossTerms, torch.Tensor]:
    """Loss terms of one batch and the scalar to backpropagate.

    The target segmentation term is computed once per batch on the shared
    target half, from the fused features of every sub-network.
    """
    if not subs:
        raise ValueError("empty batch")
    ref = next(model.parameters())
    zero = ref.new_zeros(())
    source_seg = zero
    adv = zero
    target_ids = subs[0].target_ids
    target_packs = []
    labeled_idx = None
    for sb in subs:
        if sb.target_ids != target_ids:
            raise ValueError("sub-batches of one batch must share their target items")
        if sb.images.shape[0] == 0:
            continue
        n_src = len(sb.source_ids)
        pack = model.encode(sb.source_index, sb.images.to(ref.dtype))
        if n_src:
            masks = torch.stack(sb.masks[:n_src])
            logits = model.decode_source(sb.source_index, pack.select(slice(0, n_src)))
            source_seg = source_seg + segmentation_loss(logits, masks).sum()
        if adversarial:
            # GRL is the identity forward, so this value is the plain domain CE
            logits = model.classify_domain(sb.source_index, pack.bottleneck, lambda_)
            adv = adv + domain_loss(logits, sb.domain_labels.to(ref.dtype)).sum()
        if target_ids:
            target_packs.append(pack.select(slice(n_src, None)))
            if labeled_idx is None:
                labeled_idx = [k for k, m in enumerate(sb.masks[n_src:]) if m is not None]
                target_masks = [m for m in sb.masks[n_src:] if m is not None]
    target_seg = zero
    if target_packs and labeled_idx:
        idx = torch.tensor(labeled_idx)
        logits = model.decode_target_fused([p.select(idx) for p in target_packs])
        target_seg = segmentation_loss(logits, torch.stack(target_masks)).sum()
        if target_loss_per_subbatch:
            target_seg = target_seg * len(subs)
    terms = LossTerms(source_seg, target_seg, adv, alpha, lambda_)
    objective = source_seg + alpha * target_seg + adv
    return terms, objective


@dataclass
class EpochRecord:
    epoch: int
    source_seg: float
    target_seg: float
    adversarial: float
    total: float
    val: Optional[MetricReport] = None
    wall_time: float = 0.0
    steps: int = 0

    def val_mean(self, metric: str) -> float:
        return self.val.mean(metric) if self.val is not None else math.nan


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> Path:
        """One line per epoch; wall time is left out so reruns compare bitwise."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([r.epoch, *(repr(float(v)) for v in (r.source_seg, r.target_seg, r.adversarial, r.total)),
                            r.steps, *(repr(float(r.val_mean(m))) for m in ("dice", "iou", "f2", "f05"))])
        return path


HISTORY_COLUMNS = ["epoch", "source_seg", "target_seg", "adversarial", "total", "steps",
                   "val_dice", "val_iou", "val_f2", "val_f05"]


def make_plan(config: TrainConfig, sources: Sequence[DomainDataset], target_train: DomainDataset,
              epoch: int) -> EpochPlan:
    if config.sampler == "target-only":
        return plan_target_epoch(target_train, config.n_sb, epoch, config.seed)
    if config.sampler == "mixed":
        return plan_epoch_mixed(sources, target_train, config.n_sb, epoch, config.seed)
    return plan_epoch(sources, target_train, config.n_sb, epoch, config.seed)


def _check_finite(terms: LossTerms, epoch: int, step: int):
    for name, value in terms.as_floats().items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} loss ({value}) at epoch {epoch}, step {step}")


def train(model: MultiSourceNet, sources: Sequence[DomainDataset], target_train: DomainDataset,
          target_val: Optional[DomainDataset], config: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None):
    """Run the epoch/batch loop and return the best-validation model and its history.

    Without a validation set the final parameters are kept.
    """
    if config.sampler != "target-only" and len(sources) != model.n_sources:
        raise ValueError(f"model has {model.n_sources} sub-networks but {len(sources)} sources were given")
    dtype = next(model.parameters()).dtype
    torch.manual_seed(config.seed)
    optimizer = torch.optim.RMSprop(model.parameters(), lr=config.learning_rate)
    history = TrainHistory()
    best_state, best_dice = None, -math.inf
    has_val = target_val is not None and len(target_val) > 0
    model.train()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        for group in optimizer.param_groups:
            group["lr"] = config.learning_rate_at(epoch)
        plan = make_plan(config, sources, target_train, epoch)
        sums = {"source_seg": 0.0, "target_seg": 0.0, "adversarial": 0.0, "total": 0.0}
        for step, batch in enumerate(plan):
            subs = materialize(batch, sources, target_train, dtype)
            terms, objective = batch_loss(model, subs, config.alpha, config.lambda_,
                                          config.adversarial, config.target_loss_per_subbatch)
            _check_finite(terms, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            # a batch without any differentiable term leaves the parameters alone
            if objective.requires_grad:
                objective.backward()
                optimizer.step()
            for k, v in terms.as_floats().items():
                sums[k] += v
        n = max(len(plan), 1)
        record = EpochRecord(epoch + 1, *(sums[k] / n for k in ("source_seg", "target_seg", "adversarial", "total")),
                             steps=len(plan))
        if has_val:
            record.val = evaluate(model, target_val)
            if record.val.mean("dice") > best_dice:
                best_dice = record.val.mean("dice")
                best_state = copy.deepcopy(model.state_dict())
                history.best_epoch = record.epoch
        record.wall_time = time.perf_counter() - start
        history.records.append(record)
        log.info("epoch %d: %s val dice %.3f", record.epoch,
                 {k: round(v, 5) for k, v in sums.items()}, record.val_mean("dice"))
        if on_epoch is not None:
            on_epoch(record)
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        history.best_epoch = len(history.records)
    return model, history
