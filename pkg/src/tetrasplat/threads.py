"""Thread-count control (``TETRASPLAT_THREADS``) and a view-parallel map."""

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError

ENV_VAR = "TETRASPLAT_THREADS"


def thread_count():
    """Worker threads for view-parallel work: the env override, else the CPU count."""
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def map_views(fn, items):
    """``list(map(fn, items))``, spread over threads when more than one is allowed.

    The render kernels release the GIL, so threads overlap the heavy part.
    """
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
