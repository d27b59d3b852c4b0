__all__ = [
    "routers",
]
