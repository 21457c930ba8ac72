"""HTTP retrieval service over a built index and a trained checkpoint."""
from .app import create_app

__all__ = ["create_app"]
