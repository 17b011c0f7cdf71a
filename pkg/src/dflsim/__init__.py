"""Deterministic desk-scale simulator for decentralized federated learning
with robust aggregation and poisoning attacks."""

__version__ = "0.1.0"
