"""crnmt: desk-scale semi-supervised NMT with consistency regularization."""

__version__ = "0.1.0"
