"""Damage-aware PPO for legged robots: simulator, curriculum PPO, damage diagnosis, recovery loop."""

__version__ = "0.1.0"
