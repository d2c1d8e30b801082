"""First-order bounds and mean-field estimates for two-phase composites."""
from dataclasses import dataclass

import numpy as np

from .mandel import (
    check_symmetric,
    plane_iso_moduli,
    plane_iso_stiffness,
    plane_strain_stiffness,
)


@dataclass(frozen=True)
class PhasePair:
    """Two SPD phase stiffnesses and the volume fraction of phase 0.

    Parameters
    ----------
    c0_stiffness, c1_stiffness : ndarray (m, m)
        Mandel stiffness of phase 0 and phase 1.
    vol0 : float
        Volume fraction ``c0`` of phase 0 in ``[0, 1]``.
    """

    c0_stiffness: np.ndarray
    c1_stiffness: np.ndarray
    vol0: float

    def __post_init__(self):
        a = check_symmetric(self.c0_stiffness)
        b = check_symmetric(self.c1_stiffness)
        if a.shape != b.shape:
            raise ValueError("phase stiffnesses have different dimensions")
        if not (0.0 <= self.vol0 <= 1.0):
            raise ValueError(f"volume fraction must lie in [0, 1], got {self.vol0}")
        for c in (a, b):
            if np.linalg.eigvalsh(c)[0] <= 0.0:
                raise ValueError("phase stiffness is not positive definite")
        object.__setattr__(self, "c0_stiffness", np.array(a, dtype=float))
        object.__setattr__(self, "c1_stiffness", np.array(b, dtype=float))
        object.__setattr__(self, "vol0", float(self.vol0))

    @property
    def vol1(self):
        return 1.0 - self.vol0

    @property
    def dim(self):
        return self.c0_stiffness.shape[0]

    @classmethod
    def from_phases(cls, phase0, phase1, vol0):
        """Plane-strain pair from two :class:`~vrnet.mandel.IsotropicPhase`."""
        return cls(plane_strain_stiffness(phase0), plane_strain_stiffness(phase1), vol0)

    def with_vol0(self, vol0):
        return PhasePair(self.c0_stiffness, self.c1_stiffness, vol0)


def voigt_bound(p):
    """Arithmetic mean ``c0 C0 + c1 C1``."""
    return p.vol0 * p.c0_stiffness + p.vol1 * p.c1_stiffness


def reuss_bound(p):
    """Harmonic mean ``(c0 C0^-1 + c1 C1^-1)^-1``."""
    s = p.vol0 * np.linalg.inv(p.c0_stiffness) + p.vol1 * np.linalg.inv(p.c1_stiffness)
    r = np.linalg.inv(s)
    return 0.5 * (r + r.T)


def voigt_reuss(p):
    return voigt_bound(p), reuss_bound(p)


def hill_average(p):
    """Midpoint of the Voigt and Reuss bounds."""
    return 0.5 * (voigt_bound(p) + reuss_bound(p))


def eshelby_circular(nu):
    """Plane-strain Eshelby tensor of a circular inclusion, Mandel 3x3.

    Depends only on the host Poisson ratio ``nu``.
    """
    d = 8.0 * (1.0 - nu)
    s11 = (5.0 - 4.0 * nu) / d
    s12 = (4.0 * nu - 1.0) / d
    s66 = (3.0 - 4.0 * nu) / d
    return np.array([[s11, s12, 0.0], [s12, s11, 0.0], [0.0, 0.0, 2.0 * s66]])


def mori_tanaka_circular(p):
    """Mori–Tanaka estimate with phase 0 as host and circular phase-1 inclusions.

    ``C = C0 + c1 (C1 - C0) A (c0 I + c1 A)^-1`` with the dilute
    concentration ``A = [I + S C0^-1 (C1 - C0)]^-1``.
    """
    if p.dim != 3:
        raise ValueError("Mori–Tanaka estimate is implemented for plane strain only")
    kappa, mu = plane_iso_moduli(p.c0_stiffness)
    # plane-strain lambda = kappa - mu, nu = lambda / (2 (lambda + mu))
    nu = (kappa - mu) / (2.0 * kappa)
    s = eshelby_circular(nu)
    eye = np.eye(3)
    dc = p.c1_stiffness - p.c0_stiffness
    a_dil = np.linalg.inv(eye + s @ np.linalg.solve(p.c0_stiffness, dc))
    c = p.c0_stiffness + p.vol1 * dc @ a_dil @ np.linalg.inv(p.vol0 * eye + p.vol1 * a_dil)
    return 0.5 * (c + c.T)


def _hs_moduli(c, k, g, kref, gref):
    """Walpole form of the 2D HS expression for given comparison moduli."""
    k_eff = 1.0 / sum(ci / (ki + gref) for ci, ki in zip(c, k)) - gref
    zeta = kref * gref / (kref + 2.0 * gref)
    g_eff = 1.0 / sum(ci / (gi + zeta) for ci, gi in zip(c, g)) - zeta
    return k_eff, g_eff


def hashin_shtrikman_moduli(p):
    """Scalar HS bounds on the plane bulk and shear moduli.

    Returns
    -------
    (k_lo, g_lo), (k_hi, g_hi) : tuple of tuples
    """
    if p.dim != 3:
        raise ValueError("HS bounds are implemented for plane strain only")
    k0, g0 = plane_iso_moduli(p.c0_stiffness)
    k1, g1 = plane_iso_moduli(p.c1_stiffness)
    c = (p.vol0, p.vol1)
    k, g = (k0, k1), (g0, g1)
    # comparison media built from the extreme moduli, so non-well-ordered
    # pairs still give valid (if looser) bounds
    lo = _hs_moduli(c, k, g, min(k), min(g))
    hi = _hs_moduli(c, k, g, max(k), max(g))
    return lo, hi


def hashin_shtrikman_scalar(p):
    """Lower and upper HS bounds as isotropic Mandel matrices.

    Raises
    ------
    ValueError
        If either phase is not isotropic.
    """
    (klo, glo), (khi, ghi) = hashin_shtrikman_moduli(p)
    if p.vol0 in (0.0, 1.0):
        c = p.c0_stiffness if p.vol0 == 1.0 else p.c1_stiffness
        return c.copy(), c.copy()
    return plane_iso_stiffness(klo, glo), plane_iso_stiffness(khi, ghi)


def all_references(p):
    """Dictionary of every reference tensor for ``p`` (plane strain)."""
    v, r = voigt_reuss(p)
    hs_lo, hs_hi = hashin_shtrikman_scalar(p)
    return {
        "voigt": v,
        "reuss": r,
        "hill": 0.5 * (v + r),
        "hs_lower": hs_lo,
        "hs_upper": hs_hi,
        "mori_tanaka": mori_tanaka_circular(p),
    }


__all__ = [
    "PhasePair",
    "voigt_bound",
    "reuss_bound",
    "voigt_reuss",
    "hill_average",
    "eshelby_circular",
    "mori_tanaka_circular",
    "hashin_shtrikman_moduli",
    "hashin_shtrikman_scalar",
    "all_references",
]
