"""Multi-domain independence batching.

Every batch holds one sub-batch per source domain.  A sub-batch is half
source-i items and half target items, and all sub-batches of a batch share
the very same target half, so the fused target decoder sees one consistent
set of target images through every encoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data.types import DataError, DomainDataset

TARGET_STREAM = 0


@dataclass(frozen=True)
class SubBatch:
    source_index: int
    source_items: tuple[str, ...]
    target_items: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.source_items) + len(self.target_items)


@dataclass(frozen=True)
class Batch:
    sub_batches: tuple[SubBatch, ...]

    @property
    def size(self) -> int:
        return sum(sb.size for sb in self.sub_batches)

    @property
    def target_items(self) -> tuple[str, ...]:
        """Target ids shared by the sub-batches (first occurrence order)."""
        seen: dict[str, None] = {}
        for sb in self.sub_batches:
            for t in sb.target_items:
                seen.setdefault(t, None)
        return tuple(seen)


@dataclass(frozen=True)
class EpochPlan:
    batches: tuple[Batch, ...]
    steps_per_epoch: int
    seed: int
    epoch_index: int = 0

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


class ShuffledCycle:
    """Endless stream over ``ids``, reshuffled on every wrap."""

    def __init__(self, ids: Sequence[str], rng: np.random.Generator):
        self._ids = list(ids)
        self._rng = rng
        self._order: list[str] = []
        self._pos = 0
        self.wraps = 0

    def take(self, k: int) -> list[str]:
        out = []
        while len(out) < k:
            if self._pos == len(self._order):
                if self._order:
                    self.wraps += 1
                self._order = [self._ids[j] for j in self._rng.permutation(len(self._ids))]
                self._pos = 0
            step = min(k - len(out), len(self._order) - self._pos)
            out.extend(self._order[self._pos:self._pos + step])
            self._pos += step
        return out


def _stream_rng(seed: int, epoch_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch_index, stream])


def steps_per_epoch(source_sizes: Sequence[int], n_sb: int) -> int:
    return math.ceil(max(source_sizes) / (n_sb // 2))


def _check_n_sb(n_sb: int):
    if n_sb < 2 or n_sb % 2:
        raise DataError(f"sub-batch size must be even and >= 2, got {n_sb}")


def plan_epoch(sources: Sequence[DomainDataset], target_train: DomainDataset, n_sb: int,
               epoch_index: int = 0, seed: int = 0) -> EpochPlan:
    _check_n_sb(n_sb)
    if not sources:
        raise DataError("at least one source domain is required")
    for ds in (*sources, target_train):
        if len(ds) == 0:
            raise DataError(f"domain {ds.name} is empty")
    half = n_sb // 2
    steps = steps_per_epoch([len(s) for s in sources], n_sb)
    src_streams = [ShuffledCycle(sorted(s.ids), _stream_rng(seed, epoch_index, i))
                   for i, s in enumerate(sources, start=1)]
    tgt_stream = ShuffledCycle(sorted(target_train.ids), _stream_rng(seed, epoch_index, TARGET_STREAM))
    batches = []
    for _ in range(steps):
        target_items = tuple(tgt_stream.take(half))
        batches.append(Batch(tuple(
            SubBatch(i, tuple(stream.take(half)), target_items)
            for i, stream in enumerate(src_streams, start=1)
        )))
    return EpochPlan(tuple(batches), steps, seed, epoch_index)


def plan_target_epoch(target_train: DomainDataset, batch_size: int, epoch_index: int = 0,
                      seed: int = 0) -> EpochPlan:
    """Target-only batches (no source domain): one sub-batch of ``batch_size`` labeled target items.

    Unlabeled items carry no loss without the adversarial term, so the stream
    cycles over the labeled items; an epoch keeps the length of one pass over
    the whole training split.
    """
    if len(target_train) == 0:
        raise DataError(f"domain {target_train.name} is empty")
    if batch_size < 1:
        raise DataError("batch size must be positive")
    labeled = sorted(s.sample_id for s in target_train.samples if s.labeled)
    if not labeled:
        raise DataError(f"domain {target_train.name} has no labeled sample to train on")
    steps = math.ceil(len(target_train) / batch_size)
    stream = ShuffledCycle(labeled, _stream_rng(seed, epoch_index, TARGET_STREAM))
    batches = tuple(Batch((SubBatch(1, (), tuple(stream.take(batch_size))),))
                    for _ in range(steps))
    return EpochPlan(batches, steps, seed, epoch_index)


def plan_epoch_mixed(sources: Sequence[DomainDataset], target_train: DomainDataset, n_sb: int,
                     epoch_index: int = 0, seed: int = 0) -> EpochPlan:
    """Naive pooled batching without the independence strategy.

    All sources and the target are pooled and cut into uniform batches of
    ``N * n_sb``.  Source-i items of a batch go to sub-batch i; the target
    items drawn into a batch are shared by every sub-batch.  Per-domain
    counts follow the pool proportions instead of being balanced.
    """
    _check_n_sb(n_sb)
    if not sources:
        raise DataError("at least one source domain is required")
    pool = [(0, t) for t in sorted(target_train.ids)]
    for i, s in enumerate(sources, start=1):
        pool.extend((i, sid) for sid in sorted(s.ids))
    order = _stream_rng(seed, epoch_index, TARGET_STREAM).permutation(len(pool))
    batch_size = len(sources) * n_sb
    batches = []
    for start in range(0, len(pool), batch_size):
        chunk = [pool[k] for k in order[start:start + batch_size]]
        target_items = tuple(sid for d, sid in chunk if d == 0)
        batches.append(Batch(tuple(
            SubBatch(i, tuple(sid for d, sid in chunk if d == i), target_items)
            for i in range(1, len(sources) + 1)
        )))
    return EpochPlan(tuple(batches), len(batches), seed, epoch_index)


def naive_mixing_expectation(n_s: float, n_t: float, n_b: float) -> tuple[float, float]:
    """Expected (source, target) counts in a batch drawn from the mixed pool."""
    if n_s <= 0 or n_t <= 0 or n_b <= 0:
        raise ValueError("counts must be positive")
    total = n_s + n_t
    return n_b * n_s / total, n_b * n_t / total


@dataclass
class MaterializedSubBatch:
    source_index: int
    source_ids: tuple[str, ...]
    target_ids: tuple[str, ...]
    images: torch.Tensor               # (k, 1, H, W), sources first then targets
    masks: list[Optional[torch.Tensor]]  # (H, W) long, None where hidden
    domain_labels: torch.Tensor        # 1 source, 0 target
    labeled: torch.Tensor              # bool


def materialize(batch: Batch, sources: Sequence[DomainDataset], target: DomainDataset,
                dtype: torch.dtype = torch.float32) -> list[MaterializedSubBatch]:
    """Resolve ids into tensors, one entry per sub-batch.

    Target masks are attached only for labeled samples; source masks always.
    """
    tgt_lookup = target.index()
    out = []
    for sb in batch.sub_batches:
        if not 1 <= sb.source_index <= max(len(sources), 1):
            raise DataError(f"sub-batch refers to unknown source {sb.source_index}")
        src_lookup = sources[sb.source_index - 1].index() if sources else {}
        samples = []
        for sid in sb.source_items:
            if sid not in src_lookup:
                raise DataError(f"dangling source sample id {sid!r}")
            samples.append((src_lookup[sid], True))
        for sid in sb.target_items:
            if sid not in tgt_lookup:
                raise DataError(f"dangling target sample id {sid!r}")
            samples.append((tgt_lookup[sid], False))
        if samples:
            images = torch.from_numpy(np.stack([s.image for s, _ in samples])).unsqueeze(1).to(dtype)
        else:
            images = torch.zeros((0, 1, 1, 1), dtype=dtype)
        masks = []
        for s, is_source in samples:
            m = s.mask if is_source else s.training_mask()
            masks.append(None if m is None else torch.from_numpy(m.astype(np.int64)))
        out.append(MaterializedSubBatch(
            sb.source_index,
            sb.source_items,
            sb.target_items,
            images,
            masks,
            torch.tensor([1.0 if src else 0.0 for _, src in samples], dtype=dtype),
            torch.tensor([src or s.labeled for s, src in samples], dtype=torch.bool),
        ))
    return out
