"""Time-evolving cell shapes as conditional signed distance networks."""

__version__ = "0.1.0"
