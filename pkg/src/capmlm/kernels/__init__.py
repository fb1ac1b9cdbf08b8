"""Hot kernels with a compiled core and a numpy fallback.

The Cython extension ``_core`` is used when it was built; otherwise (or when
``CAPMLM_KERNELS=python``) the numpy/scipy versions in ``_fallback`` are used.
Both expose the same functions with the same semantics.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None


def available() -> list[str]:
    return ["python"] + (["cython"] if _core is not None else [])


def get_backend(name: str) -> ModuleType:
    if name == "python":
        return _fallback
    if name == "cython":
        if _core is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


def _select() -> tuple[str, ModuleType]:
    want = os.environ.get("CAPMLM_KERNELS", "").lower()
    if want == "python" or _core is None:
        return "python", _fallback
    return "cython", _core


BACKEND, _impl = _select()

wordpiece = _impl.wordpiece
gelu = _impl.gelu
gelu_grad = _impl.gelu_grad
layernorm = _impl.layernorm
layernorm_grad = _impl.layernorm_grad
masked_softmax = _impl.masked_softmax

__all__ = [
    "BACKEND",
    "available",
    "get_backend",
    "wordpiece",
    "gelu",
    "gelu_grad",
    "layernorm",
    "layernorm_grad",
    "masked_softmax",
]
