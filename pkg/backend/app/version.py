"""Version information for simtrain."""

__version__ = "0.1.0"
