"""Text-conditioned generation of sketch-and-extrude CAD models."""

__version__ = "0.1.0"
