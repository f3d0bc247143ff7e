"""
Process-level settings read from the environment (POMP_*) or a .env file.

Experiment parameters live in the JSON experiment config; these settings
only control how a run is executed and observed.
"""

from functools import lru_cache
from typing import Literal, Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class RuntimeSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="POMP_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    log_format: Literal["json", "human"] = "human"
    environment: str = "production"
    workers: int = Field(default=1, ge=1)
    metrics_file: Optional[str] = None
    tracing_enabled: bool = False
    jaeger_endpoint: Optional[str] = None
    trace_sampling_rate: float = Field(default=1.0, ge=0.0, le=1.0)


@lru_cache(maxsize=1)
def get_settings() -> RuntimeSettings:
    return RuntimeSettings()
