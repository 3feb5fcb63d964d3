"""Spatial-temporal And-Or graph for recognizing car fluents in video."""
__version__ = "0.1.0"
