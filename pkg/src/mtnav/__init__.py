"""Desk-scale autonomous endovascular navigation: simulator, rewards, SAC, IRL, evaluation."""

__version__ = "0.1.0"
