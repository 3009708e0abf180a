"""Periodic invariant densities of time-periodic SDEs."""

__version__ = "0.1.0"
