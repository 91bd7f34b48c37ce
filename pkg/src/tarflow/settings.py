from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

from paths import RUNS_DIR


class TarflowEnv(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="TARFLOW_")

    LOG_LEVEL: str = "INFO"
    OUTPUT_DIR: Path = RUNS_DIR
    DETERMINISTIC: bool = False
