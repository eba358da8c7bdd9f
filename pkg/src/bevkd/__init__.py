"""Elliptical-mask and affinity distillation for BEV features, with a synthetic test bed."""

__version__ = "0.1.0"
