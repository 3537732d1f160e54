"""One-shot heterogeneous communication-topology generation for multi-agent systems."""

__version__ = "0.1.0"
