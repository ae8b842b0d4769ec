"""Backend selection for the ADMM hot kernels.

The compiled extension is used when it imports; set ``ROWFED_BACKEND=python``
to force the NumPy fallback. Both backends expose the same functions.
"""
import os

from . import _pykernels

L1, MCP, SCAD = _pykernels.L1, _pykernels.MCP, _pykernels.SCAD

_forced = os.environ.get("ROWFED_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

apply_A = _impl.apply_A
apply_At = _impl.apply_At
apply_AtA = _impl.apply_AtA
prox_rows = _impl.prox_rows
tilde_theta = _impl.tilde_theta
pg_step = _impl.pg_step
penalty_sum = _impl.penalty_sum


def available_backends():
    """Names of backends importable in this environment."""
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return names
    return ["cython"] + names


def get_backend(name):
    """Return the kernel module for ``name`` ('cython' or 'python')."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
