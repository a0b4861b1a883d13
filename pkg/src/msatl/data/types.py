from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Optional

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class Role:
    """Target, or Source(i) with ``index >= 1``."""

    index: int = 0

    @classmethod
    def target(cls) -> "Role":
        return cls(0)

    @classmethod
    def source(cls, i: int) -> "Role":
        if i < 1:
            raise DataError(f"source index must be >= 1, got {i}")
        return cls(i)

    @property
    def is_target(self) -> bool:
        return self.index == 0

    @property
    def is_source(self) -> bool:
        return self.index >= 1

    def __str__(self) -> str:
        return "target" if self.is_target else f"source{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Role":
        text = str(text).strip().lower()
        if text == "target":
            return cls.target()
        if text.startswith("source"):
            return cls.source(int(text[len("source"):].strip("()_ ") or 0))
        raise DataError(f"unknown role {text!r}")


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    domain_id: int = 0
    labeled: bool = True
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim != 2:
            raise DataError(f"{self.sample_id}: image must be 2-D, got shape {image.shape}")
        if not np.isfinite(image).all():
            raise DataError(f"{self.sample_id}: image contains non-finite values")
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise DataError(f"{self.sample_id}: image values outside [0, 1]")
        object.__setattr__(self, "image", image)
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != image.shape:
                raise DataError(
                    f"{self.sample_id}: mask shape {mask.shape} != image shape {image.shape}"
                )
            if not np.isin(mask, (0, 1)).all():
                raise DataError(f"{self.sample_id}: mask values must be 0 or 1")
            object.__setattr__(self, "mask", mask.astype(np.uint8))
        if self.labeled and self.mask is None:
            raise DataError(f"{self.sample_id}: labeled sample without mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def training_mask(self) -> Optional[np.ndarray]:
        """Mask as seen by training; hidden for unlabeled samples."""
        return self.mask if self.labeled else None

    def with_labeled(self, labeled: bool) -> "Sample":
        return replace(self, labeled=labeled)


@dataclass(frozen=True)
class DomainDataset:
    name: str
    role: Role
    samples: tuple[Sample, ...]

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise DataError(f"{self.name}: duplicate sample ids")
        if self.role.is_source:
            for s in samples:
                if not s.labeled:
                    raise DataError(f"{self.name}: source sample {s.sample_id} is unlabeled")

    @property
    def n_labeled(self) -> int:
        return sum(1 for s in self.samples if s.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.samples) - self.n_labeled

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def index(self) -> dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}

    def subset(self, ids, name: Optional[str] = None) -> "DomainDataset":
        lookup = self.index()
        return DomainDataset(name or self.name, self.role, tuple(lookup[i] for i in ids))

    def with_role(self, role: Role) -> "DomainDataset":
        samples = tuple(replace(s, domain_id=role.index) for s in self.samples)
        return DomainDataset(self.name, role, samples)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: Fraction = Fraction(8, 10)
    val_frac: Fraction = Fraction(1, 10)
    test_frac: Fraction = Fraction(1, 10)
    unlabeled_frac: Fraction = Fraction(0)
    seed: int = 0

    def __post_init__(self):
        for name in ("train_frac", "val_frac", "test_frac", "unlabeled_frac"):
            value = _as_fraction(getattr(self, name))
            if value < 0:
                raise DataError(f"{name} must be non-negative")
            object.__setattr__(self, name, value)
        if self.train_frac + self.val_frac + self.test_frac != 1:
            raise DataError("train/val/test fractions must sum to 1")
        if self.unlabeled_frac > 1:
            raise DataError("unlabeled_frac must lie in [0, 1]")
