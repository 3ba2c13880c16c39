"""Two-scale jump-diffusion FBSDE laboratory."""

__version__ = "0.1.0"
