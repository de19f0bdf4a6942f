"""Desk-scale tactile manipulation benchmark: capsule-hand physics, Bounce and
Baoding tasks, a vectorised environment, PPO and a hyperparameter sweep."""

__version__ = "0.1.0"
