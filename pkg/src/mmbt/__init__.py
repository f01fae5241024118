"""Multiscale audio/video transformer encoders with bottleneck-token fusion."""

__version__ = "0.1.0"
