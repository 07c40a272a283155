from pathlib import Path
from functools import lru_cache

import yaml
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="QCDISTORT_",
        case_sensitive=False,
    )

    # Runtime
    log_level: str = "INFO"
    output_root: str = "./runs"
    default_seed: int = 0
    lock_timeout_s: float = 0.0

    # Loaded from YAML
    yaml_config: dict = {}

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        yaml_path = Path(__file__).parent.parent / "config" / "settings.yaml"
        if yaml_path.exists() and not self.yaml_config:
            with open(yaml_path, "r", encoding="utf-8") as f:
                self.yaml_config = yaml.safe_load(f) or {}

    @property
    def cantor_config(self) -> dict:
        return self.yaml_config.get("cantor", {})

    @property
    def modulus_config(self) -> dict:
        return self.yaml_config.get("modulus", {})

    @property
    def tube_config(self) -> dict:
        return self.yaml_config.get("tube", {})

    @property
    def wiggle_config(self) -> dict:
        return self.yaml_config.get("wiggle", {})

    @property
    def dimension_config(self) -> dict:
        return self.yaml_config.get("dimension", {})

    @property
    def render_config(self) -> dict:
        return self.yaml_config.get("render", {})


@lru_cache
def get_settings() -> Settings:
    return Settings()
