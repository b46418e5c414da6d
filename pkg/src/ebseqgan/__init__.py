"""Energy-based sequence GANs for next-item recommendation, with an exact
tabular maximum-entropy imitation-learning counterpart."""

__version__ = "0.1.0"
