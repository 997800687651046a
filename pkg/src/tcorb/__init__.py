"""Structural (ORB) summaries of tropical-cyclone IR imagery, two-pathway
structural forecasts, and interpretable intensity guidance."""

__version__ = "0.1.0"
