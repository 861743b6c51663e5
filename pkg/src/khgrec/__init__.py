"""Knowledge-enhanced heterogeneous hypergraph recommendation."""

__version__ = "0.1.0"
