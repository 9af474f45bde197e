from __future__ import annotations

import logging
import os

from dotenv import load_dotenv

load_dotenv(dotenv_path=".env")

HYPOFLOW_THREADS = int(os.getenv("HYPOFLOW_THREADS", str(os.cpu_count() or 1)))
HYPOFLOW_LOG_LEVEL = os.getenv("HYPOFLOW_LOG_LEVEL", "INFO").upper()
HYPOFLOW_OUTPUT_DIR = os.getenv("HYPOFLOW_OUTPUT_DIR", "runs")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_configured = False


def worker_count(requested: int | None = None) -> int:
    """Worker cap for sweeps; HYPOFLOW_THREADS always wins over larger requests."""
    cap = max(1, HYPOFLOW_THREADS)
    if requested is None:
        return cap
    return max(1, min(cap, int(requested)))


def configure_logging(level: str | None = None) -> None:
    global _configured
    root = logging.getLogger("app")
    root.setLevel(getattr(logging, (level or HYPOFLOW_LOG_LEVEL), logging.INFO))
    if _configured:
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    _configured = True
