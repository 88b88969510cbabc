"""Covariance-based SEM for small samples with more indicators than observations."""
__version__ = "0.1.0"
