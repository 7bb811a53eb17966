"""Glacier calving-front segmentation pipeline on synthetic SAR-like rasters."""

__version__ = "0.1.0"
