"""Version information for dgadr-toolkit."""

__version__ = "0.1.0"
