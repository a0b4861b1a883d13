"""Dataset ingestion for the two on-disk layouts.

``paired-mask-files``::

    <root>/images/<stem>.png
    <root>/masks/<stem><mask_suffix>.png       (nonzero = foreground)
    <root>/masks/<stem><mask_suffix>_<k>.png   (extra masks, BUSI style)

``xml-contours``::

    <root>/images/<case>_<image>.<ext>
    <root>/annotations/<case>.xml

The XML element names are part of :class:`LayoutDescriptor`, so DDTI files
(``<case><mark><image>1</image><svg>[{"points": [...]}]</svg></mark></case>``)
parse without code changes.
"""
from __future__ import annotations

import json
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .contours import rasterize_contours
from .preprocess import apply_exclusions, crop_dark_border, resize_pair, to_grayscale
from .types import DataError, DomainDataset, Role, Sample

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
_EXTRA_MASK = re.compile(r"^(.*)_(\d+)$")


@dataclass
class LayoutDescriptor:
    kind: str = "paired-mask-files"
    image_dir: str = "images"
    mask_dir: str = "masks"
    mask_suffix: str = ""
    # union all masks of an image; False drops multi-mask images instead
    merge_multiple_masks: bool = True
    annotation_dir: str = "annotations"
    mark_element: str = "mark"
    image_element: str = "image"
    points_element: str = "svg"
    # "json": DDTI style [{"points": [{"x":..,"y":..}, ..]}, ..]
    # "text": "x1,y1 x2,y2 ..." one polygon per element
    points_format: str = "json"
    image_name: str = "{case}_{image}"
    exclusions_file: Optional[str] = None

    KINDS = ("paired-mask-files", "xml-contours")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DataError(f"unknown layout {self.kind!r}; expected one of {self.KINDS}")

    @classmethod
    def from_dict(cls, d) -> "LayoutDescriptor":
        if isinstance(d, str):
            return cls(kind=d)
        return cls(**dict(d))


@dataclass
class Preprocess:
    size: Optional[tuple[int, int]] = (256, 256)
    crop_threshold: Optional[float] = 0.05
    crop_margin: int = 0


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_exclusions(path: Path) -> dict[str, list[tuple[int, int, int, int]]]:
    """Parse ``sample_id x0 y0 x1 y1`` records; '#' starts a comment."""
    out: dict[str, list[tuple[int, int, int, int]]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 'sample_id x0 y0 x1 y1'")
        try:
            rect = tuple(int(v) for v in parts[1:])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        out.setdefault(parts[0], []).append(rect)
    return out


def _list_images(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise DataError(f"missing directory {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _finish(sample_id, image, mask, role, labeled, rects, prep: Preprocess) -> Sample:
    image = to_grayscale(image)
    if mask is not None and mask.shape != image.shape:
        raise DataError(
            f"{sample_id}: mask shape {mask.shape} does not match image shape {image.shape}"
        )
    if rects:
        image = apply_exclusions(image, rects)
    if prep.crop_threshold is not None:
        image, box = crop_dark_border(image, prep.crop_threshold, prep.crop_margin)
        if mask is not None:
            mask = box.apply(mask)
    if prep.size is not None:
        image, mask = resize_pair(image, mask, *prep.size)
    return Sample(sample_id, image, mask, domain_id=role.index, labeled=labeled)


def _load_paired(root: Path, layout: LayoutDescriptor, role: Role, prep, exclusions):
    images = _list_images(root / layout.image_dir)
    mask_dir = root / layout.mask_dir
    mask_files = _list_images(mask_dir) if mask_dir.is_dir() else []
    image_stems = {p.stem for p in images}
    by_stem: dict[str, list[Path]] = {}
    for p in mask_files:
        stem = _mask_owner(p.stem, layout.mask_suffix, image_stems)
        if stem is not None:
            by_stem.setdefault(stem, []).append(p)

    samples = []
    for img_path in images:
        sid = img_path.stem
        masks = by_stem.get(sid, [])
        if not masks:
            if role.is_source:
                raise DataError(f"source sample without mask: {img_path}")
            mask = None
        else:
            if len(masks) > 1 and not layout.merge_multiple_masks:
                log.info("skipping %s: %d masks and merging disabled", sid, len(masks))
                continue
            mask = None
            for mp in masks:
                m = np.asarray(read_image(mp))
                if m.ndim == 3:
                    m = m.max(axis=2)
                m = (m > 0).astype(np.uint8)
                if mask is not None and mask.shape != m.shape:
                    raise DataError(f"{mp}: mask shape {m.shape} differs from sibling mask {mask.shape}")
                mask = m if mask is None else mask | m
        image = read_image(img_path)
        if mask is not None and image.shape[:2] != mask.shape:
            raise DataError(
                f"{img_path}: image {image.shape[:2]} and mask {mask.shape} dimensions differ"
            )
        samples.append(_finish(sid, image, mask, role, mask is not None, exclusions.get(sid), prep))
    return samples


def _mask_owner(stem: str, suffix: str, image_stems: set[str]) -> Optional[str]:
    """Image stem a mask file belongs to, or None."""
    m = _EXTRA_MASK.match(stem)
    candidates = [stem] + ([m.group(1)] if m else [])
    for cand in candidates:
        if suffix:
            if not cand.endswith(suffix):
                continue
            cand = cand[: -len(suffix)]
        if cand in image_stems:
            return cand
    return None


def parse_contour_xml(path: Path, layout: LayoutDescriptor) -> dict[str, list[list[tuple[float, float]]]]:
    """Map image number -> list of polygons for one annotation file."""
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    out: dict[str, list] = {}
    for mark in tree.getroot().iter(layout.mark_element):
        img_el = mark.find(layout.image_element)
        key = img_el.text.strip() if img_el is not None and img_el.text else "1"
        polys = out.setdefault(key, [])
        for pts_el in mark.iter(layout.points_element):
            text = (pts_el.text or "").strip()
            if not text:
                continue
            if layout.points_format == "json":
                try:
                    items = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}: bad contour JSON: {exc}") from exc
                if isinstance(items, dict):
                    items = [items]
                for item in items:
                    pts = [(float(p["x"]), float(p["y"])) for p in item.get("points", [])]
                    polys.append(pts)
            elif layout.points_format == "text":
                pts = []
                for pair in text.replace(";", " ").split():
                    x, y = pair.split(",")
                    pts.append((float(x), float(y)))
                polys.append(pts)
            else:
                raise DataError(f"unknown points_format {layout.points_format!r}")
    return out


def _clip_polygon(poly, h, w):
    return [(min(max(x, 0.0), float(w)), min(max(y, 0.0), float(h))) for x, y in poly]


def _load_xml(root: Path, layout: LayoutDescriptor, role: Role, prep, exclusions):
    image_dir = root / layout.image_dir
    images = {p.stem: p for p in _list_images(image_dir)}
    ann_dir = root / layout.annotation_dir
    if not ann_dir.is_dir():
        raise DataError(f"missing directory {ann_dir}")
    polygons_by_image: dict[str, list] = {}
    for xml_path in sorted(ann_dir.glob("*.xml")):
        case = xml_path.stem
        for image_no, polys in parse_contour_xml(xml_path, layout).items():
            name = layout.image_name.format(case=case, image=image_no)
            polygons_by_image.setdefault(name, []).extend(polys)

    samples = []
    for sid in sorted(images):
        polys = polygons_by_image.get(sid)
        if polys is None and role.is_source:
            raise DataError(f"source sample without mask: {images[sid]}")
        image = read_image(images[sid])
        mask = None
        if polys is not None:
            h, w = image.shape[:2]
            polys = [_clip_polygon(p, h, w) for p in polys if len(p) >= 3]
            mask = rasterize_contours(polys, h, w)
        samples.append(_finish(sid, image, mask, role, mask is not None, exclusions.get(sid), prep))
    return samples


def load_domain(root_path, layout_descriptor, role: Role, name: Optional[str] = None,
                preprocess: Optional[Preprocess] = None) -> DomainDataset:
    root = Path(root_path)
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    layout = layout_descriptor
    if not isinstance(layout, LayoutDescriptor):
        layout = LayoutDescriptor.from_dict(layout)
    prep = preprocess or Preprocess()
    exclusions = {}
    if layout.exclusions_file:
        exclusions = read_exclusions(root / layout.exclusions_file)
    if layout.kind == "paired-mask-files":
        samples = _load_paired(root, layout, role, prep, exclusions)
    else:
        samples = _load_xml(root, layout, role, prep, exclusions)
    samples.sort(key=lambda s: s.sample_id)
    return DomainDataset(name or root.name, role, tuple(samples))
