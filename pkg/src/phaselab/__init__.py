"""Desk-scale lab for pretraining phase transitions and reading-time prediction."""

__version__ = "0.1.0"
