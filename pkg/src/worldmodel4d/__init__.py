"""Joint RGB + depth video world model trained from scratch on a synthetic driving world."""

__version__ = "0.1.0"
