"""Hierarchical push / pick&place Q-learning on a cluttered tabletop grid world."""

__version__ = "0.1.0"
