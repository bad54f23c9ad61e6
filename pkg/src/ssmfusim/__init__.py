"""Fusion-aware performance simulator and design-space explorer for SSM accelerators."""

__version__ = "0.1.0"
