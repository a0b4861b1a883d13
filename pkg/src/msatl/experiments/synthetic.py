"""Synthetic ultrasound-like domains with exact masks.

Each domain is described by a :class:`DomainStyle`: the lesion shape family,
the lesion appearance (intensity, internal grain, a dark halo), the
background (intensity, speckle grain, depth gradient), dark bands that mimic
acoustic shadows, and decoys that copy one lesion cue.  Sharing a subset of
these knobs between the target and a source is how limited similarity is
expressed: in the default suite source 1 shares only the halo and source 2
only the internal grain.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..data.types import DomainDataset, Role, Sample

SHAPES = ("ellipse", "rectangle", "blob")


@dataclass
class DomainStyle:
    name: str
    shape: str = "ellipse"
    lesion_level: float = 0.25
    lesion_grain: float = 1.0
    # internal texture strength of the lesion; None reuses the background speckle
    lesion_speckle: Optional[float] = None
    background_level: float = 0.6
    background_grain: float = 1.0
    speckle: float = 0.35
    noise: float = 0.04
    gradient: float = 0.0
    shadows: int = 0
    # distractors: even ones copy the lesion's grain, odd ones its halo
    decoys: int = 0
    # intensity factor of a thin halo just outside the lesion boundary; 1.0 means no halo
    rim: float = 1.0
    rim_width: int = 1
    size_range: tuple[float, float] = (0.18, 0.32)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape family {self.shape!r}")
        self.size_range = tuple(self.size_range)

    @classmethod
    def from_dict(cls, d) -> "DomainStyle":
        return cls(**dict(d))


def default_styles() -> list[DomainStyle]:
    """Target, then source 1 (shares the lesion halo), source 2 (shares the lesion grain).

    In the target the lesion has both cues and each decoy has only one, so
    neither source alone tells lesions from decoys.
    """
    target = DomainStyle("target", shape="blob", lesion_level=0.58, lesion_grain=2.5, lesion_speckle=0.45,
                         background_level=0.58, background_grain=0.5, speckle=0.4, noise=0.06,
                         gradient=0.3, shadows=2, decoys=2, rim=0.45)
    source1 = DomainStyle("source1", shape="ellipse", lesion_level=0.58, lesion_grain=0.5, lesion_speckle=0.4,
                          background_level=0.58, background_grain=0.5, speckle=0.4, noise=0.06, rim=0.45)
    source2 = DomainStyle("source2", shape="rectangle", lesion_level=0.58, lesion_grain=2.5, lesion_speckle=0.45,
                          background_level=0.58, background_grain=0.5, speckle=0.4, noise=0.06)
    return [target, source1, source2]


@dataclass
class SyntheticSpec:
    styles: list[DomainStyle] = field(default_factory=default_styles)
    samples_per_domain: list[int] | int = 20
    image_size: int = 64

    def __post_init__(self):
        self.styles = [s if isinstance(s, DomainStyle) else DomainStyle.from_dict(s) for s in self.styles]
        if isinstance(self.samples_per_domain, int):
            self.samples_per_domain = [self.samples_per_domain] * len(self.styles)
        self.samples_per_domain = list(self.samples_per_domain)
        if len(self.samples_per_domain) != len(self.styles):
            raise ValueError("samples_per_domain must list one count per domain")
        if len(self.styles) < 2:
            raise ValueError("need a target and at least one source style")

    @property
    def n_domains(self) -> int:
        return len(self.styles)

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        d = dict(d)
        if "styles" in d:
            d["styles"] = [DomainStyle.from_dict(s) for s in d["styles"]]
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# shapes


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return xx / size, yy / size


def sample_shape(family: str, rng: np.random.Generator, size_range) -> dict:
    lo, hi = size_range
    cx, cy = rng.uniform(0.32, 0.68, size=2)
    angle = float(rng.uniform(0, math.pi))
    if family == "ellipse":
        a, b = rng.uniform(lo, hi, size=2)
        return {"family": family, "cx": float(cx), "cy": float(cy), "a": float(a), "b": float(b), "angle": angle}
    if family == "rectangle":
        hx, hy = rng.uniform(lo * 0.8, hi * 0.8, size=2)
        return {"family": family, "cx": float(cx), "cy": float(cy), "hx": float(hx), "hy": float(hy), "angle": angle}
    r0 = float(rng.uniform(lo, hi))
    amps = rng.uniform(0.05, 0.22, size=3)
    phases = rng.uniform(0, 2 * math.pi, size=3)
    return {"family": family, "cx": float(cx), "cy": float(cy), "r0": r0,
            "amps": [float(a) for a in amps], "phases": [float(p) for p in phases]}


def shape_mask(params: dict, size: int) -> np.ndarray:
    """Analytic raster of a shape at pixel centers (coordinates normalized to [0, 1])."""
    xx, yy = _grid(size)
    dx, dy = xx - params["cx"], yy - params["cy"]
    family = params["family"]
    if family in ("ellipse", "rectangle"):
        c, s = math.cos(params["angle"]), math.sin(params["angle"])
        u = c * dx + s * dy
        v = -s * dx + c * dy
        if family == "ellipse":
            inside = (u / params["a"]) ** 2 + (v / params["b"]) ** 2 <= 1.0
        else:
            inside = (np.abs(u) <= params["hx"]) & (np.abs(v) <= params["hy"])
    else:
        theta = np.arctan2(dy, dx)
        radius = np.full_like(theta, params["r0"])
        for k, (a, p) in enumerate(zip(params["amps"], params["phases"]), start=2):
            radius = radius + params["r0"] * a * np.cos(k * theta + p)
        inside = np.hypot(dx, dy) <= radius
    return inside.astype(np.uint8)


# --------------------------------------------------------------------------
# textures


def _smooth_noise(rng: np.random.Generator, size: int, grain: float) -> np.ndarray:
    """Unit-variance Gaussian field with correlation length ``grain`` pixels."""
    field_ = rng.standard_normal((size, size))
    if grain <= 0.3:
        return field_
    freqs = np.fft.fftfreq(size)
    fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
    kernel = np.exp(-2 * (math.pi * grain) ** 2 * (fx ** 2 + fy ** 2))
    out = np.real(np.fft.ifft2(np.fft.fft2(field_) * kernel))
    std = out.std()
    return out / std if std > 0 else out


def _halo(mask: np.ndarray, width: int) -> np.ndarray:
    """Pixels within ``width`` (chessboard distance) outside the mask."""
    m = mask.astype(bool)
    padded = np.pad(m, width)
    grown = np.zeros_like(m)
    n = m.shape[0]
    for dy in range(-width, width + 1):
        for dx in range(-width, width + 1):
            grown |= padded[width + dy:width + dy + n, width + dx:width + dx + m.shape[1]]
    return grown & ~m


def render(style: DomainStyle, params: dict, size: int, rng: np.random.Generator):
    mask = shape_mask(params, size)
    xx, yy = _grid(size)
    # depth attenuation: darker towards the bottom, ultrasound style
    background = style.background_level * (1.0 - style.gradient * yy)
    bg_tex = _smooth_noise(rng, size, style.background_grain)
    fg_tex = _smooth_noise(rng, size, style.lesion_grain)
    image = background * (1.0 + style.speckle * bg_tex)
    for _ in range(style.shadows):
        x0 = rng.uniform(0.05, 0.95)
        width = rng.uniform(0.04, 0.1)
        y0 = rng.uniform(0.0, 0.5)
        band = np.exp(-((xx - x0) / width) ** 2) * (yy > y0)
        image = image * (1.0 - 0.6 * band)
    fg_speckle = style.speckle if style.lesion_speckle is None else style.lesion_speckle
    if style.decoys:
        decoy_tex = _smooth_noise(rng, size, style.lesion_grain)
        for k in range(style.decoys):
            decoy = shape_mask(sample_shape("ellipse", rng, style.size_range), size)
            if k % 2 == 0:
                # lesion grain without the halo
                image = np.where(decoy.astype(bool), background * (1.0 + fg_speckle * decoy_tex), image)
            else:
                # halo around plain background
                image = np.where(_halo(decoy, style.rim_width), image * style.rim, image)
    if style.rim != 1.0:
        image = np.where(_halo(mask, style.rim_width), image * style.rim, image)
    lesion = style.lesion_level * (1.0 + fg_speckle * fg_tex)
    image = np.where(mask.astype(bool), lesion, image)
    image = image + style.noise * rng.standard_normal((size, size))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def gen_synthetic(spec: SyntheticSpec, seed: int = 0) -> list[DomainDataset]:
    """Render every domain; the first style is the target, the rest are sources 1..N."""
    out = []
    for d, (style, count) in enumerate(zip(spec.styles, spec.samples_per_domain)):
        role = Role.target() if d == 0 else Role.source(d)
        rng = np.random.default_rng([seed, d])
        samples = []
        for j in range(count):
            params = sample_shape(style.shape, rng, style.size_range)
            image, mask = render(style, params, spec.image_size, rng)
            samples.append(Sample(f"{style.name}-{j:04d}", image, mask, domain_id=role.index,
                                  labeled=True, meta={"shape": params, "size": spec.image_size}))
        out.append(DomainDataset(style.name, role, tuple(samples)))
    return out
