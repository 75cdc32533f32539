from __future__ import annotations

from dataclasses import dataclass
import os

from dotenv import load_dotenv


def _env(name: str, default: str | None = None) -> str | None:
    value = os.getenv(name)
    if value is None or value == "":
        return default
    return value


def _env_int(name: str, default: int) -> int:
    value = _env(name)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        return default


def _env_optional_int(name: str) -> int | None:
    value = _env(name)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        return None


@dataclass(frozen=True)
class Settings:
    log_level: str
    data_dir: str
    runs_db: str
    seed: int | None
    num_threads: int


def load_settings() -> Settings:
    load_dotenv()

    data_dir = _env("FUTURENET_DATA_DIR", "data")
    num_threads = _env_int("FUTURENET_THREADS", 1)
    if num_threads < 1:
        raise ValueError("FUTURENET_THREADS must be >= 1")

    return Settings(
        log_level=_env("LOG_LEVEL", "INFO"),
        data_dir=data_dir,
        runs_db=_env("FUTURENET_RUNS_DB", os.path.join(data_dir, "runs.db")),
        seed=_env_optional_int("FUTURENET_SEED"),
        num_threads=num_threads,
    )
