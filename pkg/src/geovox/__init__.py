"""Conditional generative modelling of categorical 3D geological volumes."""

__version__ = "0.1.0"

AIR = 1
N_CATEGORIES = 9
