"""Contextual entrainment distance for dyadic conversations."""

__version__ = "0.1.0"
