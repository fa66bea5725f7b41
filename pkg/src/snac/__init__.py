"""Swarm navigation and small-body characterization toolkit."""

__version__ = "0.1.0"
