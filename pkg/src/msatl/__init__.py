"""Multi-source adversarial transfer learning for binary image segmentation."""

__version__ = "0.1.0"
