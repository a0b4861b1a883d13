from .contours import rasterize_contours, trace_contours
from .loading import LayoutDescriptor, Preprocess, load_domain, parse_contour_xml, read_exclusions
from .preprocess import CropBox, apply_exclusions, crop_dark_border, resize_pair, to_grayscale
from .splits import partition_labels, split_target, unlabeled_count
from .types import DataError, DomainDataset, Role, Sample, SplitSpec

__all__ = [
    "CropBox",
    "DataError",
    "DomainDataset",
    "LayoutDescriptor",
    "Preprocess",
    "Role",
    "Sample",
    "SplitSpec",
    "apply_exclusions",
    "crop_dark_border",
    "load_domain",
    "parse_contour_xml",
    "partition_labels",
    "rasterize_contours",
    "read_exclusions",
    "resize_pair",
    "split_target",
    "to_grayscale",
    "trace_contours",
    "unlabeled_count",
]
