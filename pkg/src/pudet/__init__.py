"""PU risk estimation for cell detection with incomplete annotations."""

__version__ = "0.1.0"
