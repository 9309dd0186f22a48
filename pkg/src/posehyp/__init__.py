"""Weakly supervised multi-hypothesis 3D pose lifting from 2D joints."""

__version__ = "0.1.0"
