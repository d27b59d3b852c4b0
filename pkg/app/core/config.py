from functools import lru_cache
from typing import Optional
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings loaded from environment variables or .env file."""

    # App
    environment: str = Field(default="dev", alias="ENVIRONMENT")
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")

    # Report output; overrides [output].directory of a run config when set
    output_dir: Optional[str] = Field(default=None, alias="SDIDML_OUTPUT_DIR")

    # Worker hint for joblib; never changes results
    threads: int = Field(default=1, ge=1, alias="SDIDML_THREADS")

    # Runs submitted over HTTP are kept in memory this long
    run_ttl_minutes: int = Field(default=60, alias="SDIDML_RUN_TTL_MINUTES")

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()  # type: ignore[call-arg]
