"""Desk-scale parallel off-policy RL training engine."""
__version__ = "0.1.0"
