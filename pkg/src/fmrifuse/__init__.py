"""Multimodal transformer decoding brain states from fMRI patches plus DICOM metadata."""

__version__ = "0.1.0"
