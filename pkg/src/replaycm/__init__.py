"""Replay-attack spoofing countermeasure toolkit."""

__version__ = "0.1.0"
