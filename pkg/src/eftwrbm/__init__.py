"""Enhanced factored three-way RBMs for speech detection."""

__version__ = "0.1.0"
