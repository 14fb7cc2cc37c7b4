"""Backend selection for the compiled kernels.

Set ``HOPGRAPH_DISABLE_NUMBA=1`` to force the pure-numpy code paths. The
choice is read once at import; :func:`use_backend` overrides it at runtime
(tests and the benchmark use this to compare both paths).
"""
from __future__ import annotations

import contextlib
import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

NUMBA_AVAILABLE = _numba is not None
_backend = "numba" if NUMBA_AVAILABLE and os.environ.get("HOPGRAPH_DISABLE_NUMBA", "").lower() in _FALSY else "numpy"


def njit(func):
    """Compile ``func`` lazily with numba, or return it untouched."""
    if not NUMBA_AVAILABLE:
        return func
    return _numba.njit(cache=True)(func)


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def configure_threads() -> None:
    """Apply ``HOPGRAPH_THREADS`` to numba's thread pool if set."""
    value = os.environ.get("HOPGRAPH_THREADS")
    if value and NUMBA_AVAILABLE:
        _numba.set_num_threads(max(1, min(int(value), _numba.config.NUMBA_NUM_THREADS)))
