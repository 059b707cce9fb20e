"""divmax: train small generators to diverge from their inspiring sets."""

__version__ = "0.1.0"
