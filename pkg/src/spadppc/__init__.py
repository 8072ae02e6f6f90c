"""Simulated single-photon LiDAR histograms, probabilistic point clouds,
NPD filtering and farthest probable point sampling."""

__version__ = "0.1.0"
