"""Desk-scale semantic scene completion with context-aware voxel queries."""
__version__ = "0.1.0"
