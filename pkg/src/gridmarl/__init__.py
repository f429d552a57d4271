"""Multi-agent reinforcement learning for secondary voltage control of microgrids."""

__version__ = "0.1.0"
