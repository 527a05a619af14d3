"""Hierarchical variational autoencoders with merge modules (MatNets)"""

__version__ = "0.1.0"
