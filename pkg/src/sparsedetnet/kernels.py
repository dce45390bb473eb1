"""Backend selection for the hot kernels.

The compiled ``_core`` extension is used when importable; otherwise the numpy
implementations in ``_fallback``. Set ``SPARSEDETNET_BACKEND=python`` to force
the fallback (useful for benchmarking and cross-checking).
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("SPARSEDETNET_BACKEND", "").lower() != "python":
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

matvec = _impl.matvec
gram_batch = _impl.gram_batch
solve_batch = _impl.solve_batch
ml_search_batch = _impl.ml_search_batch


def get_backend(name):
    """Return the kernel module for ``name`` ('python' or 'cython')."""
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")
