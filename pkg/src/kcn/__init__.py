"""Kernelized capsule networks: capsule features feeding a sparse variational GP classifier."""

__version__ = "0.1.0"
