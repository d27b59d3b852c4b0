__all__ = [
    "config",
    "errors",
    "logging_config",
    "seeding",
]
