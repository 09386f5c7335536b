"""Federated pix2pix synthesis with a two-site synthetic benchmark."""

__version__ = "0.1.0"
