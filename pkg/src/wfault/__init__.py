"""Bit-exact simulator for operation-level faults in direct and Winograd convolution."""

__version__ = "0.1.0"
