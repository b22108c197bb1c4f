"""Multiplexed phase retrieval with the weighted-covariance spectral method."""

__version__ = "0.1.0"
