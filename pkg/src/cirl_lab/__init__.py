"""Control-informed reinforcement learning on a simulated CSTR."""

__version__ = "0.1.0"
