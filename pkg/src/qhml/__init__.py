"""Hybrid quantum-classical regression with gradual-tanh interface normalization."""

__version__ = "0.1.0"
