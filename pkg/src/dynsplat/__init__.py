"""Dynamic urban scene reconstruction with a Gaussian scaffold and neural-field appearance."""

__version__ = "0.1.0"
