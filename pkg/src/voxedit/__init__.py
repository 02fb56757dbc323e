"""Guided flow-matching editing of voxel shapes at desk scale."""

__version__ = "0.1.0"
