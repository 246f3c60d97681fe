"""Deep Q-learning research engine for daily futures trading."""

__version__ = "0.1.0"
