"""Dual-encoder attack detector with shared-expert mixture-of-experts layers."""

__version__ = "0.1.0"
