"""Path-space divergence constructions for degenerate diffusions."""

__version__ = "0.1.0"
