"""Symbolic regression that scores candidates against executable domain-prior checks."""

__version__ = "0.1.0"
