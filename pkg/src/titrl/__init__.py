"""Transformer-in-Transformer backbones for deep reinforcement learning."""

__version__ = "0.1.0"
