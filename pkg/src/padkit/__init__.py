"""Anomaly detection over frozen vision-transformer patch features.

Trains a cross-patch attention discriminator against self-supervised feature
distortions and scores test images at the image and pixel level.
"""

__version__ = "0.1.0"
