"""Multi-agent RL for UAM passenger delivery: simulator, energy model, CommNet actor-critic and IQL baseline."""

__version__ = "0.1.0"
