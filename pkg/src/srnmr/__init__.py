"""Synchronized-readout NV magnetometry simulator and NMR spectral analysis."""

__version__ = "0.1.0"
