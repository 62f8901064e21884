"""Satellite imagery to socio-economic indicators, at desk scale."""

__version__ = "0.1.0"
