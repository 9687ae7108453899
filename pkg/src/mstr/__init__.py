"""Desk-scale multi-scale deformable-attention HOI detector."""

__version__ = "0.1.0"
