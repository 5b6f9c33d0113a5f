"""Backend selection for the fused relaxation kernels.

The relaxation inner loop exists twice: a pure-numpy step loop (always
available, single source of truth for the dynamics) and fused numba kernels
for the MLP-family models. ``HOLOEP_BACKEND=numpy`` forces the numpy path,
``HOLOEP_BACKEND=numba`` insists on the kernels and fails loudly if numba is
missing. Unset (or ``auto``), the kernels are used whenever numba imports.
"""

import os

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

ENV_VAR = "HOLOEP_BACKEND"

_override = None


def backend_name() -> str:
    if _override is not None:
        return _override
    choice = os.environ.get(ENV_VAR, "auto").strip().lower()
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        if not HAS_NUMBA:
            raise RuntimeError(f"{ENV_VAR}=numba but numba is not importable")
        return "numba"
    if choice not in ("", "auto"):
        raise ValueError(f"unknown {ENV_VAR} value: {choice!r}")
    return "numba" if HAS_NUMBA else "numpy"


def numba_enabled() -> bool:
    return backend_name() == "numba"


class use_backend:
    """Context manager pinning the backend regardless of the environment.

    Used by the benchmark to time both paths in one process.
    """

    def __init__(self, name: str):
        if name not in ("numpy", "numba"):
            raise ValueError(f"unknown backend {name!r}")
        if name == "numba" and not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        self.name = name
        self._prev = None

    def __enter__(self):
        global _override
        self._prev = _override
        _override = self.name
        return self

    def __exit__(self, *exc):
        global _override
        _override = self._prev
        return False
