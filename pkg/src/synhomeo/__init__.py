"""Synaptic-homeostasis continual adaptation for EEG subject streams."""

__version__ = "0.1.0"
