"""Online phase recognition with long-term history and short-term impression memory."""

__version__ = "0.1.0"
