"""Mandel-basis tensor algebra for plane-strain (m=3) and 3D (m=6) elasticity.

Stiffness and compliance are stored as symmetric ``m x m`` matrices in the
orthonormal Mandel basis (shear components carry a ``sqrt(2)`` weight), so
Frobenius norms and eigenvalues are basis consistent.

Functions
---------
plane_strain_stiffness(phase)
    3x3 Mandel stiffness of an isotropic phase in plane strain.
iso_stiffness_3d(bulk, shear)
    6x6 Mandel stiffness of an isotropic 3D solid.
eigh(a)
    Sorted, sign-normalised eigenpairs via cyclic Jacobi.
loewner_leq(a, b, tol)
    Löwner order predicate ``a <= b``.
rel_frobenius(a, b)
    Relative Frobenius error ``|a - b| / |a|``.
isotropic_projection_6(c)
    Frobenius-orthogonal projection onto isotropic 6x6 tensors.
directional_young(c, theta)
    Directional Young's modulus of a plane-strain stiffness.
"""
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

SQRT2 = math.sqrt(2.0)

#: Mandel matrix of ``I (x) I / 3`` in 3D.
IDEN_VOL_6 = np.zeros((6, 6))
IDEN_VOL_6[:3, :3] = 1.0 / 3.0
#: Mandel matrix of the deviatoric projector ``I_sym - I (x) I / 3``.
P2_ISO_6 = np.eye(6) - IDEN_VOL_6

DEFAULT_LOEWNER_TOL = 1e-9
_SYM_TOL = 1e-12


@dataclass(frozen=True)
class IsotropicPhase:
    """Isotropic linear elastic phase given by Young's modulus and Poisson ratio."""

    young: float
    poisson: float

    def __post_init__(self):
        if not (self.young > 0.0 and math.isfinite(self.young)):
            raise ValueError(f"Young's modulus must be positive, got {self.young}")
        if not (-1.0 < self.poisson < 0.5):
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {self.poisson}")

    @property
    def lame(self):
        e, nu = self.young, self.poisson
        return e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def shear(self):
        return self.young / (2.0 * (1.0 + self.poisson))

    @property
    def bulk(self):
        """3D bulk modulus ``E / (3 (1 - 2 nu))``."""
        return self.young / (3.0 * (1.0 - 2.0 * self.poisson))

    @property
    def plane_bulk(self):
        """Plane-strain (2D) bulk modulus ``lambda + mu``."""
        return self.lame + self.shear


#: Phase pair used throughout the examples: stiff (1 GPa, 0.3) and soft (1 MPa, 0.49), in MPa.
DEFAULT_PHASES = (IsotropicPhase(1000.0, 0.3), IsotropicPhase(1.0, 0.49))


def plane_strain_stiffness(phase):
    """Mandel 3x3 plane-strain stiffness ``[[l+2m, l, 0], [l, l+2m, 0], [0, 0, 2m]]``."""
    if phase.poisson >= 0.5:
        raise ValueError("plane strain requires poisson < 0.5")
    lam, mu = phase.lame, phase.shear
    return np.array([
        [lam + 2.0 * mu, lam, 0.0],
        [lam, lam + 2.0 * mu, 0.0],
        [0.0, 0.0, 2.0 * mu],
    ])


def plane_iso_stiffness(kappa, mu):
    """Plane-strain isotropic Mandel matrix from 2D bulk ``kappa`` and shear ``mu``."""
    return np.array([
        [kappa + mu, kappa - mu, 0.0],
        [kappa - mu, kappa + mu, 0.0],
        [0.0, 0.0, 2.0 * mu],
    ])


def plane_iso_moduli(c, rtol=1e-10):
    """Return ``(kappa, mu)`` of an isotropic 3x3 Mandel matrix.

    Raises
    ------
    ValueError
        If ``c`` is not of plane isotropic form within ``rtol``.
    """
    c = np.asarray(c, dtype=float)
    kappa = 0.5 * (c[0, 0] + c[0, 1])
    mu = 0.5 * c[2, 2]
    if np.linalg.norm(c - plane_iso_stiffness(kappa, mu)) > rtol * np.linalg.norm(c):
        raise ValueError("matrix is not plane-isotropic")
    return kappa, mu


def iso_stiffness_3d(bulk, shear):
    """Mandel 6x6 stiffness ``3K (I(x)I)/3 + 2G P2``."""
    if not (bulk > 0.0 and shear > 0.0):
        raise ValueError("bulk and shear moduli must be positive")
    return 3.0 * bulk * IDEN_VOL_6 + 2.0 * shear * P2_ISO_6


def voigt_to_mandel(c):
    """Convert a Voigt stiffness matrix (engineering shear strains) to Mandel form.

    Shear rows and columns are scaled by ``sqrt(2)``, the shear-shear block
    by 2. Works for plane (3x3) and full (6x6) matrices.
    """
    c = np.array(c, dtype=float)
    m = c.shape[0]
    if m == 3:
        w = np.array([1.0, 1.0, SQRT2])
    elif m == 6:
        w = np.array([1.0, 1.0, 1.0, SQRT2, SQRT2, SQRT2])
    else:
        raise ValueError("expected a 3x3 or 6x6 matrix")
    return c * np.outer(w, w)


def mandel_to_voigt(c):
    c = np.array(c, dtype=float)
    m = c.shape[0]
    w = np.array([1.0, 1.0, SQRT2]) if m == 3 else np.array([1.0] * 3 + [SQRT2] * 3)
    return c / np.outer(w, w)


def check_symmetric(a, rtol=_SYM_TOL):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > rtol * max(scale, np.finfo(float).tiny):
        raise ValueError("matrix is not symmetric")
    return a


def _order_eigs(w, v):
    """Sort ascending, sign-normalise columns, break ties deterministically."""
    nb, m = w.shape
    # first clearly nonzero component of every eigenvector positive
    mag = np.abs(v)
    thresh = 1e-12 * mag.max(axis=1, keepdims=True)
    first = np.argmax(mag > thresh, axis=1)
    lead = np.take_along_axis(v, first[:, None, :], axis=1)[:, 0, :]
    v = v * np.where(lead < 0.0, -1.0, 1.0)[:, None, :]
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    scale = np.max(np.abs(w), axis=1, keepdims=True)
    tie = np.diff(w, axis=1) <= 1e-12 * np.maximum(scale, np.finfo(float).tiny)
    for k in np.flatnonzero(tie.any(axis=1)):
        i = 0
        while i < m:
            j = i
            while j + 1 < m and tie[k, j]:
                j += 1
            if j > i:
                cols = list(range(i, j + 1))
                keys = sorted(cols, key=lambda c: tuple(np.round(v[k, :, c], 12)))
                v[k, :, i:j + 1] = v[k][:, keys]
                w[k, i:j + 1] = w[k, keys]
            i = j + 1
    return w, v


def eigh_batch(a):
    """Eigenpairs of a batch of symmetric matrices ``(B, m, m)``.

    Eigenvalues ascend; each eigenvector's first nonzero component is
    positive; numerically tied eigenvalues are ordered by their eigenvectors
    lexicographically.
    """
    a = np.asarray(a, dtype=float)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    w, v = kernels.jacobi_eigh(a)
    return _order_eigs(w, v)


def eigh(a):
    """Eigenpairs ``(w, v)`` of one symmetric matrix, see :func:`eigh_batch`."""
    a = np.asarray(a, dtype=float)
    w, v = eigh_batch(a[None])
    return w[0], v[0]


def eigvalsh(a):
    return eigh(a)[0]


def loewner_leq(a, b, tol=DEFAULT_LOEWNER_TOL):
    """True iff ``a <= b`` in the Löwner order, i.e. ``min eig(b - a) >= -tol |b|_F``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    lam_min = eigvalsh(b - a)[0]
    return bool(lam_min >= -tol * np.linalg.norm(b))


def loewner_leq_batch(a, b, tol=DEFAULT_LOEWNER_TOL):
    """Vectorised :func:`loewner_leq` over leading batch axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    m = a.shape[-1]
    d = (b - a).reshape(-1, m, m)
    w = eigh_batch(d)[0]
    nb = np.linalg.norm(b.reshape(-1, m, m), axis=(1, 2))
    return (w[:, 0] >= -tol * nb).reshape(a.shape[:-2])


def rel_frobenius(a, b):
    """Relative Frobenius error ``|a - b|_F / |a|_F``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    if na == 0.0:
        raise ValueError("reference matrix has zero norm")
    return float(np.linalg.norm(a - b) / na)


def isotropic_projection_6(c):
    """Project a 6x6 Mandel matrix onto the isotropic subspace.

    Returns
    -------
    proj : ndarray (6, 6)
        ``3 K (I(x)I)/3 + 2 G P2``.
    bulk, shear : float
        ``K = sum_{i,j<=3} C_ij / 9`` and ``G = (tr C - 3K) / 10``.
    """
    c = np.asarray(c, dtype=float)
    if c.shape != (6, 6):
        raise ValueError("isotropic projection expects a 6x6 Mandel matrix")
    bulk = c[:3, :3].sum() / 9.0
    shear = (np.trace(c) - 3.0 * bulk) / 10.0
    proj = 3.0 * bulk * IDEN_VOL_6 + 2.0 * shear * P2_ISO_6
    return proj, float(bulk), float(shear)


def mandel_direction(theta):
    """Mandel vector of ``n (x) n`` for in-plane unit vectors at angle ``theta``."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * c, s * s, SQRT2 * s * c], axis=-1)


def directional_young(c, theta):
    """Directional Young's modulus ``E(theta) = 1 / (d^T C^-1 d)`` of a 3x3 stiffness."""
    c = np.asarray(c, dtype=float)
    if c.shape != (3, 3):
        raise ValueError("directional_young expects a 3x3 plane-strain matrix")
    try:
        s = np.linalg.inv(c)
    except np.linalg.LinAlgError as exc:
        raise ValueError("stiffness is singular") from exc
    d = mandel_direction(theta)
    return 1.0 / np.einsum("...i,ij,...j->...", d, s, d)


def format_float(x):
    """17 significant digits; parses back to the identical double."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("non-finite value cannot be serialised")
    return format(x, ".17g")


def matrix_to_json(a):
    """Row-major nested JSON array text with 17-significant-digit entries."""
    a = np.asarray(a, dtype=float)
    rows = ("[" + ", ".join(format_float(x) for x in row) + "]" for row in a)
    return "[" + ", ".join(rows) + "]"


def matrix_from_json(text):
    a = np.array(json.loads(text, parse_int=float), dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    return a
