"""Multiview scleral-vessel imaging pipeline on a synthetic cohort."""

__version__ = "0.1.0"
