"""Volumetric glioma segmentation with high-to-low quality transfer on synthetic phantoms."""

__version__ = "0.1.0"

MODALITIES = ("t1", "t1gd", "t2", "flair")
REGIONS = ("et", "tc", "wt")
