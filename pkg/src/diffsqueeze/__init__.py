"""Differential two-interferometer phase estimation with squeezed probes."""

__version__ = "0.1.0"
