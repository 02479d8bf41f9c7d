"""Grouped coordinate attention in a ResNet50 U-Net, on a small numpy autodiff engine."""

__version__ = "0.1.0"
