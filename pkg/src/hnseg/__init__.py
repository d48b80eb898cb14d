"""UNETR-based head and neck tumour segmentation on PET/CT, implemented on numpy."""

__version__ = "0.1.0"
