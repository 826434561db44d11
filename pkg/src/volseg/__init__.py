"""Volumetric brain-tumor segmentation toolkit built on a small numpy autodiff core."""
__version__ = "0.1.0"
