"""Duo-space (BEV + PV) multi-camera 3D detection at desk scale."""

__version__ = "0.1.0"
