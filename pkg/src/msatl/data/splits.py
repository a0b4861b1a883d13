from __future__ import annotations

import math
from dataclasses import replace
from fractions import Fraction

import numpy as np

from .types import DataError, DomainDataset, SplitSpec, _as_fraction


def _permutation(n: int, seed: int, stream: int) -> np.ndarray:
    return np.random.default_rng([seed, stream]).permutation(n)


_SPLIT_STREAM = 0x5B17
_LABEL_STREAM = 0x1ABE


def split_target(dataset: DomainDataset, spec: SplitSpec):
    """Seeded train/val/test split; val and test sizes are floored, the rest goes to train."""
    if not dataset.role.is_target:
        raise DataError(f"split_target expects a target dataset, got {dataset.role}")
    n = len(dataset)
    if n < 3:
        raise DataError(f"{dataset.name}: need at least 3 samples to split, got {n}")
    n_val = math.floor(spec.val_frac * n)
    n_test = math.floor(spec.test_frac * n)
    n_train = n - n_val - n_test
    # ids sorted first so the split depends only on the id set and the seed
    ids = sorted(dataset.ids)
    perm = [ids[k] for k in _permutation(n, spec.seed, _SPLIT_STREAM)]
    train_ids = sorted(perm[:n_train])
    val_ids = sorted(perm[n_train:n_train + n_val])
    test_ids = sorted(perm[n_train + n_val:])
    return (
        dataset.subset(train_ids, f"{dataset.name}/train"),
        dataset.subset(val_ids, f"{dataset.name}/val"),
        dataset.subset(test_ids, f"{dataset.name}/test"),
    )


def unlabeled_count(n: int, unlabeled_frac) -> int:
    """round(frac * n) with halves rounded up, in exact arithmetic."""
    return math.floor(_as_fraction(unlabeled_frac) * n + Fraction(1, 2))


def partition_labels(train: DomainDataset, unlabeled_frac, seed: int) -> DomainDataset:
    """Hide masks of a seeded prefix of a fixed permutation.

    The permutation does not depend on the fraction, so unlabeled sets are
    nested across fractions for the same seed.
    """
    if not train.role.is_target:
        raise DataError(f"partition_labels expects a target dataset, got {train.role}")
    frac = _as_fraction(unlabeled_frac)
    if not 0 <= frac <= 1:
        raise DataError(f"unlabeled_frac must lie in [0, 1], got {unlabeled_frac}")
    for s in train.samples:
        if s.mask is None:
            raise DataError(f"{s.sample_id}: target training sample has no mask to hide")
    ids = sorted(train.ids)
    order = [ids[k] for k in _permutation(len(ids), seed, _LABEL_STREAM)]
    hidden = set(order[:unlabeled_count(len(ids), frac)])
    samples = tuple(replace(s, labeled=s.sample_id not in hidden) for s in train.samples)
    return type(train)(train.name, train.role, samples)
