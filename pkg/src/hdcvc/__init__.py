"""Desk-scale learned video codec with heterogeneous deformable compensation."""

from .nets import DESK, HDCVC, NetworkConfig

__version__ = "0.1.0"
