"""Backbone-to-GADF exporter: frozen DINOv2 features on disk."""

__version__ = "0.1.0"
