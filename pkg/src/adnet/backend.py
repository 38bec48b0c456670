"""Kernel backend selection.

The compiled extension (adnet._ckernels) is preferred; the pure-numpy
fallback (adnet._kernels_np) is selected at import when the extension is
missing. ADN_BACKEND=python|cython|auto overrides the choice, and
get_kernels(name) gives explicit access to either backend for comparison
benchmarks and parity tests.

Both backends produce bit-identical forward outputs (same fixed accumulation
order, same float rounding), so selection never changes results.
"""

import os

from . import _kernels_np
from .errors import AdnetError

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_BACKENDS = {"python": _kernels_np}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def get_kernels(name=None):
    """Return the kernel module for `name` (default: env/auto selection)."""
    if name is None:
        name = os.environ.get("ADN_BACKEND", "auto")
    if name == "auto":
        return _BACKENDS.get("cython", _kernels_np)
    try:
        return _BACKENDS[name]
    except KeyError:
        raise AdnetError(
            f"unknown or unavailable kernel backend {name!r}; "
            f"available: {', '.join(available_backends())}") from None


def backend_name():
    return get_kernels().NAME


def resolve_threads(threads=None):
    """Worker count: explicit arg, else ADN_THREADS (0/unset = all cores)."""
    if threads is None:
        raw = os.environ.get("ADN_THREADS", "0").strip() or "0"
        try:
            threads = int(raw)
        except ValueError:
            raise AdnetError(f"ADN_THREADS must be an integer, got {raw!r}") from None
    if threads < 0:
        raise AdnetError(f"thread count must be >= 0, got {threads}")
    if threads == 0:
        threads = os.cpu_count() or 1
    return threads
