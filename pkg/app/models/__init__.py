__all__ = [
    "schemas",
    "run_config",
]
