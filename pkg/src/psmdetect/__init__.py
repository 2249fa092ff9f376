"""Early identification of pathogenic social media accounts from action logs."""

__version__ = "0.1.0"
