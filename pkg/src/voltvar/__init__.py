"""Placement of Volt-VAr smart inverters on unbalanced distribution feeders."""

__version__ = "0.1.0"
