"""Hot-kernel backend selection.

Two interchangeable implementations exist: a compiled Cython core
(`mat.kernels._ckern`) and a numpy fallback (`mat.kernels.numpy_backend`).
The environment variable MAT_KERNELS picks one:

    MAT_KERNELS=c     require the compiled core (ImportError if missing)
    MAT_KERNELS=py    force the numpy fallback
    MAT_KERNELS=auto  compiled if importable, else numpy (default)

All entry points here normalize arguments (mask defaults, contiguity) so
both backends see identical inputs. `benchmarks/bench_kernels.py` compares
the two for speed and agreement.
"""

import os

import numpy as np

from . import numpy_backend

_choice = os.environ.get("MAT_KERNELS", "auto").lower()
if _choice not in ("auto", "c", "py"):
    raise ValueError(f"MAT_KERNELS must be auto, c, or py (got {_choice!r})")

_impl = None
if _choice in ("auto", "c"):
    try:
        from . import _ckern as _impl
    except ImportError:
        if _choice == "c":
            raise
        _impl = None
if _impl is None:
    _impl = numpy_backend


def backend_name() -> str:
    """Name of the active backend: 'compiled' or 'numpy'."""
    return "numpy" if _impl is numpy_backend else "compiled"


def available_backends() -> dict:
    """Importable backend modules keyed by name (for tests/benchmarks)."""
    backends = {"numpy": numpy_backend}
    try:
        from . import _ckern

        backends["compiled"] = _ckern
    except ImportError:
        pass
    return backends


def _norm_mask(mask, rows: int, cols: int) -> np.ndarray:
    if mask is None:
        return np.ones((rows, cols), dtype=bool)
    return np.ascontiguousarray(mask, dtype=bool)


def sdpa_forward(q, k, v, num_heads, scale, mask=None, top_k=None):
    mask = _norm_mask(mask, q.shape[0], k.shape[0])
    return _impl.sdpa_forward(q, k, v, int(num_heads), float(scale), mask, int(top_k or 0))


def sdpa_backward(q, k, v, num_heads, scale, weights, d_out):
    return _impl.sdpa_backward(q, k, v, int(num_heads), float(scale), weights,
                               np.ascontiguousarray(d_out))


def layer_norm_forward(x, gamma, beta, eps):
    return _impl.layer_norm_forward(x, gamma, beta, float(eps))


def layer_norm_backward(x, gamma, mean, rstd, dy):
    return _impl.layer_norm_backward(x, gamma, mean, rstd, np.ascontiguousarray(dy))


def softmax_rows_forward(x, mask=None):
    mask = _norm_mask(mask, x.shape[0], x.shape[1])
    return _impl.softmax_rows_forward(x, mask)


def softmax_rows_backward(y, dy):
    return _impl.softmax_rows_backward(y, np.ascontiguousarray(dy))
