"""Curvature, Brownian motion and Einstein-metric checks for chart metrics."""
