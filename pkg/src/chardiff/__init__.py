"""Character-guided diffusion restoration of license-plate images."""

__version__ = "0.1.0"
