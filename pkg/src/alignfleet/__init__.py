"""Batch alignment pipeline engine and spot-fleet simulator."""

__version__ = "0.1.0"
