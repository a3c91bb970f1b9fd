"""dropforge: waterdrop video synthesis, removal, and evaluation."""

__version__ = "0.1.0"
