"""Centralized and decentralized federated learning over a numpy LSTM classifier."""

__version__ = "0.1.0"
