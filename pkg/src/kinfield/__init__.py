"""Kinematically regularized dynamic radiance fields on numpy."""

__version__ = "0.1.0"
