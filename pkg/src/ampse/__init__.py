"""Surrogate-model parameter search for analog/mixed-signal circuits."""

__version__ = "0.1.0"
