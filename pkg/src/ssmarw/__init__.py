"""Stochastic sandpile and activated random walk simulation toolkit."""

__version__ = "0.1.0"
