"""Language-aware dynamic visual-token compression, desk scale."""

__version__ = "0.1.0"
