from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="FFPF_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Worker threads for dataset generation and evaluation. 1 keeps every run
    # bit-identical; results are merged in index order for any value.
    THREADS: int = 1
    # Check every op output for NaN/Inf.
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"


def get_settings() -> Settings:
    return Settings()
