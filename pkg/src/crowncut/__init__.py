"""Tree-crown delineation from multispectral drone imagery."""

__version__ = "0.1.0"
