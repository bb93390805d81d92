"""System-level simulator for a network-sliced cellular V2X highway."""

__version__ = "0.1.0"
