"""Fundamental solutions of non-divergence parabolic operators by the parametrix method."""

__version__ = "0.1.0"
