"""Kernel backend selection.

The hot elementwise kernels exist twice: a compiled Cython extension
(`metabnn._kernels`) and a pure-numpy fallback (`metabnn._kernels_np`).
At import time the compiled extension is preferred when present; the
environment variable METABNN_KERNELS ("compiled", "numpy" or "auto")
overrides, and `set_backend()` switches at runtime (used by the tests and
the benchmark).

Matrix products are BLAS calls through numpy in both backends; only the
elementwise update/gating passes differ.
"""

import os

import numpy as np

from . import _kernels_np

try:
    from . import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

_BACKENDS = {"numpy": _kernels_np}
if _kernels_c is not None:
    _BACKENDS["compiled"] = _kernels_c


def available_backends():
    return tuple(sorted(_BACKENDS))


def _initial_backend():
    choice = os.environ.get("METABNN_KERNELS", "auto")
    if choice == "auto":
        return "compiled" if _kernels_c is not None else "numpy"
    if choice not in _BACKENDS:
        raise ImportError(
            f"METABNN_KERNELS={choice!r} but available backends are "
            f"{available_backends()}"
        )
    return choice


_active_name = _initial_backend()
_active = _BACKENDS[_active_name]


def active_backend() -> str:
    return _active_name


def set_backend(name: str) -> None:
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown backend {name!r}; available: {available_backends()}"
        )
    _active_name = name
    _active = _BACKENDS[name]


def _flat(a):
    # all parameter/activation arrays in this package are C-contiguous
    return a.reshape(-1)


def binarize(w: np.ndarray) -> np.ndarray:
    out = np.empty_like(w)
    _active.binarize(_flat(w), _flat(out))
    return out


def adam_step(m1, m2, g, t, beta1, beta2, eps) -> np.ndarray:
    out = np.empty_like(g)
    _active.adam_step(_flat(m1), _flat(m2), _flat(g), _flat(out),
                      beta1, beta2, eps, t)
    return out


def metaplastic_update(w, u, m, eta) -> None:
    _active.metaplastic_update(_flat(w), _flat(u), m, eta)


def plain_update(w, u, eta) -> None:
    _active.plain_update(_flat(w), _flat(u), eta)


def hardtanh_gate(dy, y) -> np.ndarray:
    out = np.empty_like(dy)
    _active.hardtanh_gate(_flat(dy), _flat(y), _flat(out))
    return out


def ewc_accum(g, w, anchor, fisher, lam) -> None:
    _active.ewc_accum(_flat(g), _flat(w), _flat(anchor), _flat(fisher), lam)
