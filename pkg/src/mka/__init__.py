"""Memory-keyed attention: hierarchical memory levels, routed attention engines and their checks."""

__version__ = "0.1.0"
