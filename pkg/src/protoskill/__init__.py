"""Prototype-based skill discovery and alignment for one-shot imitation."""
__version__ = "0.1.0"
