"""Small helpers shared by the actions and the command line interface"""
from . import misc

__all__ = ["misc"]
