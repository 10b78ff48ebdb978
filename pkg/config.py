# config.py
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()


@dataclass
class Config:
    OUTPUT_DIR: str = field(default_factory=lambda: os.getenv("TUNNELSLAM_OUTPUT", "./runs"))
    DATABASE_URL: str = field(default_factory=lambda: os.getenv("TUNNELSLAM_DATABASE_URL", ""))
    LOG_LEVEL: str = field(default_factory=lambda: os.getenv("TUNNELSLAM_LOG_LEVEL", "INFO"))
    JOBS: int = field(default_factory=lambda: int(os.getenv("TUNNELSLAM_JOBS", "1")))

    RESULTS_DB_NAME: str = "results.db"

    def database_url(self, output_dir: Path) -> str:
        """Explicit URL wins; otherwise a SQLite store inside the output root."""
        if self.DATABASE_URL:
            return self.DATABASE_URL
        return f"sqlite+aiosqlite:///{(Path(output_dir) / self.RESULTS_DB_NAME).resolve()}"

    @property
    def log_level(self) -> int:
        return getattr(logging, self.LOG_LEVEL.upper(), logging.INFO)


config = Config()
