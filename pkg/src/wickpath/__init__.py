"""Controlled diffusions, first-order-condition strategies and path-integral control."""

__version__ = "0.1.0"
