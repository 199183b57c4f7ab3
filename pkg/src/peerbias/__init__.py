"""Peer-influence bias under latent homophily: proxies, models and simulation."""

__version__ = "0.1.0"
