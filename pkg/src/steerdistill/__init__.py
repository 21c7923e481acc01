"""Distilling demonstration-induced behavior into state-conditioned steering adapters, at desk scale."""

__version__ = "0.1.0"
