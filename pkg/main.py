"""ASGI entry point for hosting the run service."""

from pimbrl_lab.server import app

__all__ = ["app"]
