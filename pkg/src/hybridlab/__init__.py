"""Desk-scale laboratory for hybrid generative-discriminative
open-set recognition."""

__version__ = "0.1.0"
