"""Memory-backed tree search over staged diagnostic agents."""

__version__ = "0.1.0"
