"""Learned experience-replay sampling with from-scratch replay, networks and agents."""

__version__ = "0.1.0"
