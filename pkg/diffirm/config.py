"""
Process-level settings from environment variables (prefix DIFFIRM_) and .env.

Run configuration (hyperparameters, dataset paths) lives in run-config files
validated by diffirm.models.config; these settings only cover what should be
overridable from the shell without touching a config file.
"""
import logging

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="DIFFIRM_", env_file=".env", extra="ignore")

    # DIFFIRM_SEED overrides the seed of any run config
    seed: int | None = None

    # Logging
    log_level: str = "INFO"

    # Outputs
    output_dir: str = "runs"

    # gradcheck command threshold
    gradcheck_tolerance: float = 1e-4


settings = Settings()


def configure_logging(level: str | None = None) -> None:
    """Install the root handler once; only entry points call this."""
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
