"""Offline correlation of enclosure network traffic with smart-PDU power readings."""

__version__ = "0.1.0"
