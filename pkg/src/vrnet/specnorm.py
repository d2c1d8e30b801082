"""Voigt–Reuss spectral normalisation of effective stiffness tensors.

An admissible effective tensor ``C`` satisfies ``R <= C <= V`` in the Löwner
order. Factoring the gap ``V - R = L L^T`` maps it to

    Y = L^+ (V - C) L^+^T,

a symmetric matrix with spectrum in ``[0, 1]``; conversely every such ``Y``
gives ``C = V - L Y L^T`` inside the envelope. Parameterising ``Y`` by
eigenvalues in ``[0, 1]`` and an orthogonal matrix makes the guarantee
architectural.

``L`` is taken as the symmetric square root of the gap. It differs from the
plain eigenvector factor ``Q sqrt(Lambda)`` only by an orthogonal factor
on the right, so the admissible set is the same, but it is independent of
eigenvector ordering and signs and varies smoothly with the volume fraction.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import netgraph as ng
from .bounds import PhasePair, reuss_bound, voigt_bound
from .mandel import eigh, eigh_batch, loewner_leq

DEFAULT_EPS = 1e-12
CLAMP_TOL = 1e-6
SPECTRUM_TOL = 1e-9
# gaps below this fraction of |V| are treated as round-off, not stiffness
_ROUNDOFF = 1e-13


def n_offdiag(m):
    return m * (m - 1) // 2


def dim_from_dof(n):
    """Matrix size ``m`` from the DOF count ``m + m (m - 1) / 2``."""
    m = int(round((math.sqrt(8 * n + 1) - 1) / 2))
    if m * (m + 1) // 2 != n:
        raise ValueError(f"{n} is not a valid DOF count")
    return m


@dataclass(frozen=True)
class SpectralFactor:
    """Factorisation ``V - R = L L^T`` with its pseudo-inverse.

    Attributes
    ----------
    L, Lplus : ndarray (m, m)
    rank : int
        Number of retained gap eigenvalues.
    eps : float
        Relative truncation threshold used.
    voigt, reuss : ndarray (m, m)
    gap_values, gap_vectors : ndarray
        Full eigen decomposition of the gap (after truncation of tiny values).
    """

    L: np.ndarray
    Lplus: np.ndarray
    rank: int
    eps: float
    voigt: np.ndarray
    reuss: np.ndarray
    gap_values: np.ndarray = field(repr=False)
    gap_vectors: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return self.L.shape[0]

    @property
    def projector(self):
        """Orthogonal projector onto the retained gap subspace."""
        q = self.gap_vectors[:, self.gap_values > 0.0]
        return q @ q.T


def _truncate(w, scale_v, eps):
    lmax = w.max(axis=-1, keepdims=True)
    floor = np.maximum(eps * np.maximum(lmax, 0.0), _ROUNDOFF * scale_v)
    return np.where(w > floor, w, 0.0)


def factor_gap(v, r, eps=DEFAULT_EPS):
    """Factor the Voigt–Reuss gap.

    Parameters
    ----------
    v, r : ndarray (m, m)
        Voigt and Reuss bounds.
    eps : float
        Gap eigenvalues ``<= eps * lambda_max`` are discarded.

    Raises
    ------
    ValueError
        If ``V - R`` is indefinite beyond ``eps``.
    """
    v = np.asarray(v, dtype=float)
    r = np.asarray(r, dtype=float)
    if v.shape != r.shape:
        raise ValueError("bound dimensions differ")
    if not loewner_leq(r, v, eps):
        lam = eigh(v - r)[0]
        raise ValueError(f"Voigt-Reuss gap is indefinite: eigenvalues {lam}")
    w, q = eigh(v - r)
    w = _truncate(w[None], np.linalg.norm(v), eps)[0]
    root = np.sqrt(w)
    inv = np.where(w > 0.0, 1.0 / np.where(w > 0.0, root, 1.0), 0.0)
    L = (q * root) @ q.T
    Lp = (q * inv) @ q.T
    return SpectralFactor(
        L=L, Lplus=Lp, rank=int(np.count_nonzero(w)), eps=eps,
        voigt=v, reuss=r, gap_values=w, gap_vectors=q,
    )


def factor_pair(p, eps=DEFAULT_EPS):
    """:func:`factor_gap` for the bounds of a :class:`~vrnet.bounds.PhasePair`."""
    return factor_gap(voigt_bound(p), reuss_bound(p), eps)


@dataclass(frozen=True)
class NormalizedTensor:
    """Symmetric ``Y`` with spectrum in ``[0, 1]``."""

    ytilde: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.ytilde, dtype=float)
        if y.ndim != 2 or y.shape[0] != y.shape[1]:
            raise ValueError("normalised tensor must be square")
        if np.linalg.norm(y - y.T) > 1e-12 * max(np.linalg.norm(y), 1.0):
            raise ValueError("normalised tensor must be symmetric")
        w = eigh(y)[0]
        if w[0] < -SPECTRUM_TOL or w[-1] > 1.0 + SPECTRUM_TOL:
            raise ValueError(f"normalised spectrum outside [0, 1]: {w}")
        object.__setattr__(self, "ytilde", y)


@dataclass(frozen=True)
class NormalizedDOF:
    """Eigenvalues ``xi_lambda`` in [0, 1] and rotation parameters ``xi_q`` in (0, 1)."""

    xi_lambda: np.ndarray
    xi_q: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.xi_lambda, dtype=float).ravel()
        q = np.asarray(self.xi_q, dtype=float).ravel()
        if q.size != n_offdiag(lam.size):
            raise ValueError(f"expected {n_offdiag(lam.size)} rotation parameters, got {q.size}")
        if np.any(lam < 0.0) or np.any(lam > 1.0):
            raise ValueError("xi_lambda must lie in [0, 1]")
        if np.any(q <= 0.0) or np.any(q >= 1.0):
            raise ValueError("xi_q must lie in (0, 1)")
        object.__setattr__(self, "xi_lambda", lam)
        object.__setattr__(self, "xi_q", q)

    @property
    def vector(self):
        return np.concatenate([self.xi_lambda, self.xi_q])

    @classmethod
    def from_vector(cls, xi):
        xi = np.asarray(xi, dtype=float).ravel()
        m = dim_from_dof(xi.size)
        return cls(xi[:m], xi[m:])


def normalize(cbar, f, clamp_tol=CLAMP_TOL):
    """Map an effective tensor into the normalised space.

    Eigenvalues of ``Y`` violating ``[0, 1]`` by at most ``clamp_tol`` are
    clamped; the result is restricted to the retained gap subspace.

    Raises
    ------
    ValueError
        If ``cbar`` lies outside the envelope by more than ``clamp_tol``.
    """
    cbar = np.asarray(cbar, dtype=float)
    if cbar.shape != f.L.shape:
        raise ValueError("dimension mismatch between tensor and factor")
    y = f.Lplus @ (f.voigt - cbar) @ f.Lplus.T
    y = 0.5 * (y + y.T)
    w, q = eigh(y)
    if f.rank == 0:
        return NormalizedTensor(np.zeros_like(y))
    # eigenvalues of the null-space directions are exactly zero by construction
    if w[0] < -clamp_tol or w[-1] > 1.0 + clamp_tol:
        raise ValueError(
            f"tensor violates the Voigt-Reuss envelope: normalised eigenvalues {w} "
            f"(allowed [0, 1] up to {clamp_tol:g})"
        )
    if w[0] < 0.0 or w[-1] > 1.0:
        y = (q * np.clip(w, 0.0, 1.0)) @ q.T
        y = 0.5 * (y + y.T)
    return NormalizedTensor(y)


def denormalize(yt, f):
    """``C = V - L Y L^T``."""
    y = yt.ytilde if isinstance(yt, NormalizedTensor) else np.asarray(yt, dtype=float)
    c = f.voigt - f.L @ y @ f.L.T
    return 0.5 * (c + c.T)


def skew_from_params(xi_q, m):
    """Skew matrix with upper entries ``pi (2 xi_q - 1)`` in row-major order."""
    xi_q = np.asarray(xi_q, dtype=float)
    iu = np.triu_indices(m, 1)
    w = np.zeros(xi_q.shape[:-1] + (m, m))
    vals = math.pi * (2.0 * xi_q - 1.0)
    w[..., iu[0], iu[1]] = vals
    w[..., iu[1], iu[0]] = -vals
    return w


def orthogonal_from_params(xi_q, m=None):
    """Rotation ``Q = expm(W(xi_q))``; all entries 0.5 give the identity."""
    xi_q = np.asarray(xi_q, dtype=float)
    if m is None:
        n = xi_q.shape[-1]
        m = int(round((1 + math.sqrt(1 + 8 * n)) / 2))
        if n_offdiag(m) != n:
            raise ValueError(f"{n} parameters do not define a square skew matrix")
    return ng.expm_array(skew_from_params(xi_q, m))


def dof_to_tilde(d):
    """``Y = Q(xi_q) diag(xi_lambda) Q(xi_q)^T``."""
    m = d.xi_lambda.size
    q = orthogonal_from_params(d.xi_q, m)
    y = (q * d.xi_lambda) @ q.T
    return NormalizedTensor(0.5 * (y + y.T))


def loss_phi(yt, yhat):
    """``|Y - Yhat|_F / sqrt(m)``."""
    a = yt.ytilde if isinstance(yt, NormalizedTensor) else np.asarray(yt, dtype=float)
    b = yhat.ytilde if isinstance(yhat, NormalizedTensor) else np.asarray(yhat, dtype=float)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    return float(np.linalg.norm(a - b) / math.sqrt(a.shape[-1]))


# ---------------------------------------------------------------- graph versions

def tilde_graph(xi):
    """Differentiable ``Y`` from a DOF batch node of shape (B, m + m(m-1)/2)."""
    xi = ng.as_node(xi)
    m = dim_from_dof(xi.shape[-1])
    lam = xi[:, :m]
    iu = np.triu_indices(m, 1)
    # scatter rotation parameters into a skew matrix with a fixed linear map
    nq = n_offdiag(m)
    basis = np.zeros((nq, m * m))
    for k, (i, j) in enumerate(zip(*iu)):
        basis[k, i * m + j] = math.pi
        basis[k, j * m + i] = -math.pi
    # w = pi (2 xi_q - 1) placed antisymmetrically
    flat = ng.add(ng.matmul(xi[:, m:], 2.0 * basis), -basis.sum(axis=0))
    w = ng.reshape(flat, (xi.shape[0], m, m))
    q = ng.expm(w)
    lam_mat = ng.reshape(lam, (xi.shape[0], 1, m))
    return ng.matmul(q * lam_mat, q.T)


def phi_graph(y_target, y_hat):
    """Per-sample ``phi`` as a node of shape (B,)."""
    y_hat = ng.as_node(y_hat)
    m = y_hat.shape[-1]
    return ng.frobenius_norm(ng.sub(y_hat, y_target)) * (1.0 / math.sqrt(m))


class GapModel:
    """Voigt, Reuss and the symmetric gap root of a fixed phase pair as functions of ``c0``.

    Used by the surrogate, where ``c0`` is itself an output of the renderer
    and gradients must flow through the factor.
    """

    def __init__(self, c0_stiffness, c1_stiffness, eps=DEFAULT_EPS):
        self.c0 = np.asarray(c0_stiffness, dtype=float)
        self.c1 = np.asarray(c1_stiffness, dtype=float)
        self.s0 = np.linalg.inv(self.c0)
        self.s1 = np.linalg.inv(self.c1)
        self.eps = eps
        self._cache = {}

    @property
    def dim(self):
        return self.c0.shape[0]

    def pair(self, vol0):
        return PhasePair(self.c0, self.c1, vol0)

    def bounds(self, vol0):
        """Batched ``(V, R)`` for an array of volume fractions."""
        c = np.asarray(vol0, dtype=float)[..., None, None]
        v = c * self.c0 + (1.0 - c) * self.c1
        r = np.linalg.inv(c * self.s0 + (1.0 - c) * self.s1)
        return v, 0.5 * (r + np.swapaxes(r, -1, -2))

    def factor(self, vol0):
        """Cached :class:`SpectralFactor` keyed on the exact volume fraction."""
        key = float(vol0)
        f = self._cache.get(key)
        if f is None:
            v, r = self.bounds(key)
            f = factor_gap(v, r, self.eps)
            if len(self._cache) > 100_000:
                self._cache.clear()
            self._cache[key] = f
        return f

    def _roots(self, vol0):
        v, r = self.bounds(vol0)
        w, q = eigh_batch(v - r)
        w = _truncate(w, np.linalg.norm(v, axis=(-2, -1))[:, None], self.eps)
        return v, r, w, q

    def root_array(self, vol0):
        vol0 = np.atleast_1d(np.asarray(vol0, dtype=float))
        _, _, w, q = self._roots(vol0)
        return (q * np.sqrt(w)[:, None, :]) @ np.swapaxes(q, -1, -2)

    def root_graph(self, vol0):
        """Node ``L(c0)`` of shape (B, m, m) differentiable in ``c0``."""
        vol0 = ng.as_node(vol0)
        c = vol0.value.reshape(-1)
        v, r, w, q = self._roots(c)
        sw = np.sqrt(w)
        L = (q * sw[:, None, :]) @ np.swapaxes(q, -1, -2)
        # dD/dc0 for D = V - R
        dd = (self.c0 - self.c1)[None] + r @ (self.s0 - self.s1)[None] @ r
        denom = sw[:, :, None] + sw[:, None, :]
        kernel = np.where(denom > 0.0, 1.0 / np.where(denom > 0.0, denom, 1.0), 0.0)
        qt = np.swapaxes(q, -1, -2)
        dl = q @ ((qt @ dd @ q) * kernel) @ qt
        shape = vol0.shape

        def back(g):
            return (np.sum(g * dl, axis=(-2, -1)).reshape(shape),)

        return ng.custom(L, (vol0,), back)

    def voigt_graph(self, vol0):
        vol0 = ng.as_node(vol0)
        c = ng.reshape(vol0, (-1, 1, 1))
        return ng.add(ng.mul(c, self.c0 - self.c1), self.c1)

    def denormalize_graph(self, y, vol0):
        """``C = V(c0) - L(c0) Y L(c0)`` as a node of shape (B, m, m)."""
        L = self.root_graph(vol0)
        return ng.sub(self.voigt_graph(vol0), ng.matmul(ng.matmul(L, y), L))
