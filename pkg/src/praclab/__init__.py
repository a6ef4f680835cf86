"""Attention-concentration patch attacks on a toy vision-language agent."""

__version__ = "0.1.0"
