"""Kernel backend selection.

The compiled Cython core is preferred when importable; the numpy fallback is
always available. NAS_RT_BACKEND=python|compiled forces a choice at import,
NAS_RT_THREADS caps OpenMP parallelism in the compiled core (0 = auto).
Thread count never changes results: parallel loops own disjoint output slots
and reduce in a fixed order.
"""

import os

from . import _kernels_np as python_kernels

try:
    from . import _kernels_cy as compiled_kernels
    HAS_COMPILED = True
except ImportError:
    compiled_kernels = None
    HAS_COMPILED = False

active = python_kernels
_thread_cap = 0


def available_backends():
    names = ["python"]
    if HAS_COMPILED:
        names.append("compiled")
    return names


def get_kernels(name):
    if name == "python":
        return python_kernels
    if name == "compiled":
        if not HAS_COMPILED:
            raise RuntimeError("compiled kernel backend is not built")
        return compiled_kernels
    raise ValueError(f"unknown backend {name!r}")


def use(name):
    """Switch the active backend; returns the previous backend's name."""
    global active
    previous = active.NAME
    active = get_kernels(name)
    return previous


def set_threads(n):
    """Cap kernel parallelism; 0 picks the host CPU count."""
    global _thread_cap
    _thread_cap = max(0, int(n))
    resolved = _thread_cap if _thread_cap > 0 else (os.cpu_count() or 1)
    for mod in (python_kernels, compiled_kernels):
        if mod is not None:
            mod.set_num_threads(resolved)
    return resolved


def _init_from_env():
    set_threads(int(os.environ.get("NAS_RT_THREADS", "0") or 0))
    forced = os.environ.get("NAS_RT_BACKEND", "").strip().lower()
    if forced:
        use(forced)
    elif HAS_COMPILED:
        use("compiled")


_init_from_env()
