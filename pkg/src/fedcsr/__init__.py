"""Federated cued-speech recognition simulator with mutual knowledge distillation."""

__version__ = "0.1.0"
