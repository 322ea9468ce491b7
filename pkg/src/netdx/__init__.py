"""Deterministic IPv4/BGP-lite network simulator with model-based root-cause diagnosis."""

__version__ = "0.1.0"
