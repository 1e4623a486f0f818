"""Repair of topological disconnections in 3D tubular tree volumes."""

__version__ = "1.0.0"
