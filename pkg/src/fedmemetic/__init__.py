"""Federated training with memetic architecture search and a dense feature block."""

__version__ = "0.1.0"
