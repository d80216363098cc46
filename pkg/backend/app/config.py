import logging
import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

load_dotenv()

LOG_FORMAT = "[%(name)s] %(levelname)s: %(message)s"

DEFAULT_UPLOAD_DIR = os.path.join(os.path.dirname(__file__), "..", "uploads")


def _default_threads() -> int:
    return min(8, os.cpu_count() or 1)


class Settings(BaseModel):
    """Process-wide settings, read from the environment (and .env)"""

    threads: int = Field(default_factory=_default_threads, ge=1)
    database_url: str = "sqlite:///./repmetric.db"
    upload_dir: str = DEFAULT_UPLOAD_DIR
    log_level: str = "INFO"

    @field_validator("log_level")
    @classmethod
    def _upper(cls, value: str) -> str:
        return value.upper()

    @classmethod
    def from_env(cls) -> "Settings":
        values = {}
        if os.getenv("REPMETRIC_THREADS"):
            values["threads"] = int(os.environ["REPMETRIC_THREADS"])
        if os.getenv("REPMETRIC_DATABASE_URL"):
            values["database_url"] = os.environ["REPMETRIC_DATABASE_URL"]
        if os.getenv("REPMETRIC_UPLOAD_DIR"):
            values["upload_dir"] = os.environ["REPMETRIC_UPLOAD_DIR"]
        if os.getenv("REPMETRIC_LOG_LEVEL"):
            values["log_level"] = os.environ["REPMETRIC_LOG_LEVEL"]
        return cls(**values)


@lru_cache
def get_settings() -> Settings:
    return Settings.from_env()


def configure_logging(level: str = None) -> None:
    level = (level or get_settings().log_level).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger("app").setLevel(level)
