"""Voxel-wise tumor growth prediction by statistical group learning."""

__version__ = "0.1.0"
