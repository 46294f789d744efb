"""Process-level runtime settings read from the environment.

Environment variables:
- `LINKLAB_THREADS` (default: 1) caps worker threads for sweeps.
- `LINKLAB_LOG_LEVEL` (default: INFO).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass


@dataclass(frozen=True, slots=True)
class RuntimeSettings:
    threads: int = 1
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> RuntimeSettings:
        threads_raw = os.getenv("LINKLAB_THREADS", "1")
        try:
            threads = int(threads_raw)
        except ValueError as err:
            raise ValueError("LINKLAB_THREADS must be an integer") from err
        if threads < 1:
            raise ValueError("LINKLAB_THREADS must be >= 1")

        log_level = os.getenv("LINKLAB_LOG_LEVEL", "INFO").strip().upper()
        if not isinstance(logging.getLevelName(log_level), int):
            raise ValueError(f"LINKLAB_LOG_LEVEL is not a logging level: {log_level}")
        return cls(threads=threads, log_level=log_level)
