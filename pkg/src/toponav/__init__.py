"""Topological-map image-goal navigation stack on a 2D occupancy-grid simulator."""

__version__ = "0.1.0"
