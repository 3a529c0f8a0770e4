"""Self-refining behavior-tree mission planning for a simulated drone."""

__version__ = "0.1.0"
