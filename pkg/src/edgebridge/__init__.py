"""Self-supervised cross-domain representation learning through an
edge-like bridge domain, plus its desk-scale evaluation harness."""

__version__ = "0.1.0"
