"""Select the GRU recurrence implementation at import time.

The compiled extension is used when it is importable; set
``POIAUDIT_PURE_PYTHON=1`` to force the numpy fallback.
"""

import importlib
import os

BACKENDS = ("cython", "python")
_MODULES = {"cython": "poiaudit.model._gru_ext", "python": "poiaudit.model._gru_py"}


def load_backend(name: str):
    if name not in _MODULES:
        raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")
    return importlib.import_module(_MODULES[name])


def available_backends() -> list[str]:
    names = []
    for name in BACKENDS:
        try:
            load_backend(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select():
    if os.environ.get("POIAUDIT_PURE_PYTHON", "").strip() not in ("", "0"):
        return "python", load_backend("python")
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", load_backend("python")


BACKEND, _impl = _select()
gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward
adam_step = _impl.adam_step
