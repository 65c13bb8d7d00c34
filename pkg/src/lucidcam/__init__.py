"""Numpy CNN engine with Grad-CAM explanations for histopathology-style image patches."""

__version__ = "0.1.0"
