"""
Process-wide settings read from the environment (and an optional .env file).
"""
import os
from typing import Optional

from dotenv import load_dotenv

from utils.errors import ConfigValidationError

# Load environment variables from .env file
load_dotenv()


class Settings:
    """Manages environment-driven runtime settings"""

    _instance: Optional["Settings"] = None

    def __new__(cls):
        """Singleton pattern to ensure only one instance exists"""
        if cls._instance is None:
            cls._instance = super(Settings, cls).__new__(cls)
            cls._instance._initialize()
        return cls._instance

    def _initialize(self):
        """Read settings from the environment"""
        raw_threads = os.getenv("PILAMIM_THREADS", "1")
        try:
            threads = int(raw_threads)
        except ValueError:
            raise ConfigValidationError(
                "PILAMIM_THREADS", f"must be a positive integer, got {raw_threads!r}"
            )
        if threads < 1:
            raise ConfigValidationError("PILAMIM_THREADS", f"must be >= 1, got {threads}")
        self._threads = threads
        self._log_level = os.getenv("PILAMIM_LOG_LEVEL", "INFO").upper()

    @classmethod
    def reset(cls):
        """Drop the cached instance so the environment is read again"""
        cls._instance = None

    @property
    def threads(self) -> int:
        """Upper bound on worker threads (torch intra-op and prefetch)"""
        return self._threads

    @property
    def prefetch(self) -> bool:
        """Whether a background producer thread feeds training batches"""
        return self._threads > 1

    @property
    def log_level(self) -> str:
        return self._log_level
