"""Debug logging + in-process warn-once throttle.

Foundation module: depends only on stdlib. Every other cnerf module
imports debug_log from here. Log lines never reach output artifacts, so
timestamps here cannot break the byte-identical-outputs contract.
"""

from __future__ import annotations

import os
import threading
from datetime import datetime
from pathlib import Path
from typing import Optional


# Debug logging - persistent location under the user's home unless
# CNERF_DEBUG_LOG points elsewhere (tests redirect it into tmp_path).
DEFAULT_DEBUG_LOG = Path.home() / ".cnerf" / "logs" / "cnerf-debug.log"

_debug_log_path: Optional[Path] = None
_warned_keys: set[str] = set()
_lock = threading.Lock()


def get_debug_log_path() -> Path:
    """Return the active debug log path (override > env > default)."""
    if _debug_log_path is not None:
        return _debug_log_path
    env_path = os.environ.get("CNERF_DEBUG_LOG")
    if env_path:
        return Path(env_path)
    return DEFAULT_DEBUG_LOG


def set_debug_log_path(path: Optional[Path]) -> None:
    """Redirect the debug log (None restores env/default resolution)."""
    global _debug_log_path
    _debug_log_path = Path(path) if path is not None else None


def debug_log(message: str) -> None:
    """Append debug message to log file."""
    try:
        log_path = get_debug_log_path()
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with _lock:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(f"{datetime.now()}: {message}\n")
    except Exception:
        pass


def warn_once(key: str, message: str) -> bool:
    """Log `message` the first time `key` is seen in this process.

    Returns True when the warning was emitted, False when throttled.
    Worker threads share the throttle set.
    """
    with _lock:
        if key in _warned_keys:
            return False
        _warned_keys.add(key)
    debug_log(f"WARNING [{key}]: {message}")
    return True


def reset_warnings() -> None:
    """Forget every throttled key (tests use this between cases)."""
    with _lock:
        _warned_keys.clear()
