"""Event-aligned sparse-autoencoder feature discovery for closed-loop policies."""

__version__ = "0.1.0"
