"""Active tactile exploration environment for 3D shape reconstruction."""

__version__ = "0.1.0"
