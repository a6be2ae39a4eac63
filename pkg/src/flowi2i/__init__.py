"""Text-free image-conditioned flow matching for paired image restoration."""

__version__ = "0.1.0"
