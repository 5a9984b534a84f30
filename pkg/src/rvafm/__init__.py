"""Paragraph text recognition with a re-parameterisable vertical attention module."""

__version__ = "0.1.0"
