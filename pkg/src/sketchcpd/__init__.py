"""Sequential change-point detection on linear sketches of high-dimensional streams."""

__version__ = "0.1.0"
