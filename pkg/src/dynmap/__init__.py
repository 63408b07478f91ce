"""Learning dynamics-aware world models for nonprehensile cart-and-block manipulation."""

__version__ = "0.1.0"
