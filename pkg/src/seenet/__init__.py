"""One-click lesion segmentation and RECIST measurement on CT slices."""

__version__ = "0.1.0"
