"""Multi-view image to 3D shape retrieval: point encoder, view aggregator, training and search."""

__version__ = "0.1.0"
