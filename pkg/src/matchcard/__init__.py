"""Match-on-card face verification with short binary templates."""

__version__ = "0.1.0"
