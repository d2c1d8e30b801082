"""Hot-loop kernels with a compiled backend and a NumPy fallback.

The backend is chosen once at import. Set ``VRNET_PURE_PYTHON=1`` to force
the NumPy versions even when the extension is built.

Attributes
----------
BACKEND : {'cython', 'numpy'}
    Name of the backend in use.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "numpy"
_impl = _pykernels
if os.environ.get("VRNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def fe_apply(u, phase, ke):
    """Periodic bilinear-element stiffness operator, see ``_pykernels.fe_apply``."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    phase = np.ascontiguousarray(phase, dtype=np.uint8)
    ke = np.ascontiguousarray(ke, dtype=np.float64)
    if u.ndim != 4 or u.shape[1] != 2 or u.shape[2:] != phase.shape:
        raise ValueError(f"displacement shape {u.shape} does not match grid {phase.shape}")
    if phase.max(initial=0) >= ke.shape[0]:
        raise ValueError("phase index exceeds number of element matrices")
    return _impl.fe_apply(u, phase, ke)


def jacobi_eigh(a, tol=1e-15, max_sweeps=60):
    """Raw (unsorted) cyclic Jacobi eigenpairs of a batch ``(B, m, m)``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"expected a batch of square matrices, got {a.shape}")
    return _impl.jacobi_eigh(a, tol, max_sweeps)


def label_periodic(mask):
    """Periodic 4-connected labels ``(labels, count)`` of a boolean grid."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be two-dimensional")
    return _impl.label_periodic(mask)
