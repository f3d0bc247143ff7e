"""
pomp-core - Command-line interface
"""

from src.cli.app import app, main

__all__ = ["app", "main"]
