"""Single-shot, anchor-based 3-D object detection for volumetric scans."""

__version__ = "0.1.0"
