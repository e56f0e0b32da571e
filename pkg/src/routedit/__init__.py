"""Depth-routed conditioning and trace alignment for a micro video-editing DiT."""

__version__ = "0.1.0"
