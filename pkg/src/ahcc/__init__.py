"""Gauge-broken constant scalar curvature solver on the Poincare ball."""

__version__ = "0.1.0"
