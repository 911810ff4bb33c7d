"""Few-shot Siamese similarity learning with case-based explanations for canopy tiles."""

__version__ = "0.1.0"
