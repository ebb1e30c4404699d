"""EgoWorld: egocentric whole-body world model toolkit."""

from .app import main

__all__ = ["main"]
