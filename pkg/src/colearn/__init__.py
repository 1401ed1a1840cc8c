"""Collaborative training of autoregressive and non-autoregressive translation decoders."""

__version__ = "0.1.0"
