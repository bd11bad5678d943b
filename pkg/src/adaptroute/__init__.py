"""Isolated low-rank adapters per task, composed by routers learned from memory."""

__version__ = "0.1.0"
