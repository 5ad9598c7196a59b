"""Desk-scale masked-autoencoder laboratory with local contrastive losses."""

__version__ = "0.1.0"
