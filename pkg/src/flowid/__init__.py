"""Identity-preserving sprite editing with flow matching and attention-derived masks."""

__version__ = "0.1.0"
