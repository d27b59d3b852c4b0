__version__ = "0.1.0"

__all__ = [
    "cli",
    "main",
]
