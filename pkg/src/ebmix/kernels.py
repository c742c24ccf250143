"""Backend selection for the EM hot loops.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is loaded. :func:`use_backend` switches explicitly, which the test
suite and the benchmark use to compare both.
"""
from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS: dict[str, ModuleType | None] = {"cython": _compiled, "python": _kernels_py}
_active: ModuleType = _compiled if _compiled is not None else _kernels_py


def available_backends() -> list[str]:
    return [name for name, mod in _BACKENDS.items() if mod is not None]


def backend() -> str:
    return "cython" if _active is _compiled and _compiled is not None else "python"


def get(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``name`` (default: the active one)."""
    if name is None:
        return _active
    mod = _BACKENDS.get(name)
    if mod is None:
        raise ValueError(f"kernel backend {name!r} is not available")
    return mod


def use_backend(name: str) -> str:
    """Activate a backend and return the name of the previously active one."""
    global _active
    previous = backend()
    _active = get(name)
    return previous
