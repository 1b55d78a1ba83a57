"""Refine volumetric segmentations by classifying sparse point clouds."""
__version__ = "0.1.0"
