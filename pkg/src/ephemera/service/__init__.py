"""HTTP front end for a simulated cluster."""

from .app import create_app

__all__ = ["create_app"]
