"""Parametric periodic microstructures from thresholded cosine fields.

A unit cell is described by an odd ``M1 x M2`` amplitude matrix ``A``
embedded in a fixed ``K x K`` grid (``K = 11``) and a threshold ``tau``.
The field

    psi(x) = sum_{p, q} A_pq cos(2 pi (p x1 + q x2))

is sampled on a cell-centred pixel lattice of ``[-1/2, 1/2)^2``, rescaled to
``[0, 1]`` and thresholded. The first amplitude index ``p`` pairs with ``x1``
(image columns) and the second with ``x2`` (image rows).
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from . import netgraph as ng

K_PAD = 11
ALLOWED_MODES = (3, 5, 7, 9, 11)
DEFAULT_T = 1e-4
SYMMETRY_CLASSES = ("none", "diagonal", "orthotropic", "square")


@dataclass(frozen=True)
class MicroSpec:
    """One unit cell: padded amplitudes, threshold and soft temperature.

    Attributes
    ----------
    padded : ndarray (K, K)
    tau : float in [0, 1]
    temperature : float > 0
    modes : tuple (M1, M2)
        Size of the original amplitude grid (metadata only).
    """

    padded: np.ndarray
    tau: float
    temperature: float = DEFAULT_T
    modes: tuple = (K_PAD, K_PAD)

    def __post_init__(self):
        a = np.asarray(self.padded, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] % 2 == 0:
            raise ValueError("padded amplitude grid must be square with odd size")
        if not np.all(np.isfinite(a)):
            raise ValueError("amplitudes must be finite")
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not self.temperature > 0.0:
            raise ValueError("temperature must be positive")
        object.__setattr__(self, "padded", a)
        object.__setattr__(self, "tau", float(self.tau))
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))

    @classmethod
    def from_amplitudes(cls, a, tau, temperature=DEFAULT_T, k=K_PAD):
        a = np.asarray(a, dtype=float)
        return cls(embed_center(a, k), tau, temperature, a.shape)

    @property
    def amplitudes(self):
        """The original ``M1 x M2`` block."""
        m1, m2 = self.modes
        k = self.padded.shape[0]
        i0, j0 = (k - m1) // 2, (k - m2) // 2
        return self.padded[i0:i0 + m1, j0:j0 + m2]


def _check_grid(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] % 2 == 0 or a.shape[1] % 2 == 0:
        raise ValueError(f"amplitude grid must be 2D with odd sizes, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("amplitudes must be finite")
    return a


def embed_center(a, k=K_PAD):
    """Copy ``a`` into the centre of a ``k x k`` zero matrix."""
    a = _check_grid(a)
    m1, m2 = a.shape
    if k % 2 == 0 or k < max(m1, m2):
        raise ValueError(f"target size {k} must be odd and at least {max(m1, m2)}")
    out = np.zeros((k, k))
    i0, j0 = (k - m1) // 2, (k - m2) // 2
    out[i0:i0 + m1, j0:j0 + m2] = a
    return out


def pixel_centers(n):
    """Cell-centred coordinates ``(i + 0.5) / n - 0.5``."""
    return (np.arange(n) + 0.5) / n - 0.5


def cosine_bases(k, width, height):
    """Cosine and sine tables for the separable field evaluation.

    Returns ``(cx, sx, cy, sy)`` of shapes (k, width) and (k, height) with
    frequencies ``-(k-1)/2 .. (k-1)/2``.
    """
    freqs = np.arange(k) - (k - 1) // 2
    x1 = pixel_centers(width)
    x2 = pixel_centers(height)
    ax = 2.0 * math.pi * freqs[:, None] * x1[None, :]
    ay = 2.0 * math.pi * freqs[:, None] * x2[None, :]
    return np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay)


def field(spec_or_a, width=100, height=None):
    """Sample the cosine field on a ``height x width`` pixel grid.

    ``cos(a + b) = cos a cos b - sin a sin b`` makes this two small matrix
    products. Returns an array indexed ``[row (x2), column (x1)]``.
    """
    a = spec_or_a.padded if isinstance(spec_or_a, MicroSpec) else _check_grid(spec_or_a)
    height = width if height is None else height
    if width < 2 or height < 2:
        raise ValueError("field grid must be at least 2x2")
    if a.shape[0] != a.shape[1]:
        a = embed_center(a, max(a.shape) if max(a.shape) % 2 else max(a.shape) + 1)
    cx, sx, cy, sy = cosine_bases(a.shape[0], width, height)
    return cy.T @ a.T @ cx - sy.T @ a.T @ sx


def range_normalize(psi):
    """Rescale to ``[0, 1]`` by the raster extrema; constant fields give 0.5."""
    psi = np.asarray(psi, dtype=float)
    lo, hi = psi.min(axis=(-2, -1), keepdims=True), psi.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    flat = span <= 1e-14 * np.maximum(np.abs(hi), 1.0)
    out = (psi - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def threshold_hard(psi_tilde, tau):
    """Binary indicator ``chi = [psi_tilde >= tau]`` (1 marks phase 1)."""
    return (np.asarray(psi_tilde) >= tau).astype(np.float64)


def threshold_soft(psi_tilde, tau, temperature=DEFAULT_T):
    """Sigmoid indicator ``sigma((psi_tilde - tau) / T)``."""
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    return expit((np.asarray(psi_tilde, dtype=float) - tau) / temperature)


def volume_fractions(chi):
    """``(c0, c1)`` with ``c1`` the pixel mean of the phase-1 indicator."""
    c1 = float(np.mean(chi))
    return 1.0 - c1, c1


def render(spec, resolution=64, hard=True):
    """Indicator image of a spec, hard or soft at the spec temperature."""
    pt = range_normalize(field(spec, resolution))
    if hard:
        return threshold_hard(pt, spec.tau)
    return threshold_soft(pt, spec.tau, spec.temperature)


def phase_image(spec, resolution=64):
    """``uint8`` phase map for the solver (0 = phase 0, 1 = phase 1)."""
    return render(spec, resolution, hard=True).astype(np.uint8)


# ---------------------------------------------------------------- symmetries

def _orbit(a, cls):
    flips = [lambda x: x]
    if cls in ("orthotropic", "square"):
        flips = [lambda x: x, lambda x: x[::-1, :], lambda x: x[:, ::-1], lambda x: x[::-1, ::-1]]
    out = list(flips)
    if cls in ("diagonal", "square"):
        out += [lambda x, f=f: f(x).T for f in flips]
    return [f(a) for f in out]


def symmetrize(a, cls="none"):
    """Project an amplitude grid onto a symmetry class by orbit averaging.

    ``diagonal``: ``A_mn = A_nm``; ``orthotropic``: invariant under both index
    sign flips; ``square``: both.
    """
    a = _check_grid(a)
    if cls not in SYMMETRY_CLASSES:
        raise ValueError(f"unknown symmetry class {cls!r}")
    if cls in ("diagonal", "square") and a.shape[0] != a.shape[1]:
        raise ValueError("diagonal symmetry requires a square amplitude grid")
    orbit = _orbit(a, cls)
    return np.mean(orbit, axis=0)


# ---------------------------------------------------------------- sampling

def tau_grid(count):
    """``k / (count + 1)`` for ``k = 1..count``."""
    if count < 1:
        raise ValueError("threshold count must be positive")
    return np.arange(1, count + 1) / (count + 1.0)


def check_modes(modes):
    m1, m2 = (modes, modes) if np.isscalar(modes) else tuple(modes)
    if m1 not in ALLOWED_MODES or m2 not in ALLOWED_MODES:
        raise ValueError(f"mode sizes must be in {ALLOWED_MODES}, got {(m1, m2)}")
    return int(m1), int(m2)


def sample_amplitudes(rng, modes, n, symmetry="none"):
    m1, m2 = check_modes(modes)
    a = rng.uniform(-1.0, 1.0, size=(n, m1, m2))
    if symmetry != "none":
        a = np.stack([symmetrize(x, symmetry) for x in a])
    return a


def sample_spec(seed, modes, tau_count, n_amplitudes=1, symmetry="none", temperature=DEFAULT_T):
    """Deterministic specs: ``n_amplitudes`` grids times ``tau_count`` thresholds.

    Returned in (amplitude index, threshold index) order.
    """
    rng = np.random.default_rng(seed)
    taus = tau_grid(tau_count)
    out = []
    for a in sample_amplitudes(rng, modes, n_amplitudes, symmetry):
        for t in taus:
            out.append(MicroSpec.from_amplitudes(a, t, temperature))
    return out


# ---------------------------------------------------------------- topology

def component_count(mask):
    """Number of periodic 4-connected components of a boolean image."""
    return kernels.label_periodic(np.asarray(mask, dtype=bool))[1]


def phase_components(chi):
    """``(n0, n1)`` periodic component counts of both phases of a binary image."""
    chi = np.asarray(chi) > 0.5
    return component_count(~chi), component_count(chi)


def supercell_components(chi):
    """``(s0, s1)`` periodic component counts of both phases on the 2 x 2 tiling.

    A component confined to the cell appears four times on the tiling, one
    spanning the cell along one axis twice and one spanning both axes once,
    so these counts change when a phase starts or stops percolating even if
    the single-cell counts stay the same.
    """
    big = np.tile(np.asarray(chi) > 0.5, (2, 2))
    return component_count(~big), component_count(big)


# ---------------------------------------------------------------- PGM I/O

def pgm_text(chi, maxval=1):
    """Plain PGM (P2) text; rows are written top to bottom.

    With ``maxval=1`` the image must be binary; larger values quantise a
    soft image in ``[0, 1]``.
    """
    chi = np.asarray(chi, dtype=float)
    if chi.ndim != 2:
        raise ValueError("PGM export requires a 2D image")
    if maxval == 1 and not np.all((chi == 0) | (chi == 1)):
        raise ValueError("PGM export with maxval 1 requires a binary image")
    if not 1 <= maxval <= 65535 or np.any((chi < 0) | (chi > 1)):
        raise ValueError("PGM values must lie in [0, 1] and maxval in [1, 65535]")
    q = np.rint(chi * maxval).astype(np.int64)
    h, w = chi.shape
    lines = ["P2", f"{w} {h}", str(int(maxval))]
    lines += [" ".join(str(v) for v in row) for row in q]
    return "\n".join(lines) + "\n"


def write_pgm(path, chi):
    text = pgm_text(chi)
    with open(path, "w") as fh:
        fh.write(text)


def read_pgm(path):
    """Read a plain (P2) or raw (P5) PGM; values are scaled to {0, 1} by maxval."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file")
    tokens, pos = [], 2
    # header: width, height, maxval, skipping comments
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(data[start:pos]))
    w, h, maxval = tokens
    if magic == b"P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)
    else:
        pos += 1
        dtype = np.uint8 if maxval < 256 else ">u2"
        vals = np.frombuffer(data[pos:], dtype=dtype).astype(np.int64)
    if vals.size < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    img = vals[:w * h].reshape(h, w).astype(float) / maxval
    return img


# ---------------------------------------------------------------- graph renderer

class Renderer:
    """Differentiable ``(A, tau) -> chi`` on a fixed grid.

    Parameters
    ----------
    resolution : int
    k : int
        Padded amplitude size.
    """

    def __init__(self, resolution=64, k=K_PAD):
        self.resolution = resolution
        self.k = k
        self.cx, self.sx, self.cy, self.sy = cosine_bases(k, resolution, resolution)

    def field_graph(self, a):
        """Field node (B, H, W) from amplitudes node (B, k, k)."""
        at = a.T
        return ng.sub(self.cy.T @ at @ self.cx, self.sy.T @ at @ self.sx)

    def normalize_graph(self, psi):
        lo = ng.reshape(ng.amin(psi, axis=(1, 2)), (-1, 1, 1))
        hi = ng.reshape(ng.amax(psi, axis=(1, 2)), (-1, 1, 1))
        span = hi.value - lo.value
        if np.any(span <= 1e-14 * np.maximum(np.abs(hi.value), 1.0)):
            flat = (span <= 1e-14 * np.maximum(np.abs(hi.value), 1.0))
            safe = ng.add(ng.sub(hi, lo), np.where(flat, 1.0, 0.0))
            out = ng.div(ng.sub(psi, lo), safe)
            return ng.add(ng.mul(out, np.where(flat, 0.0, 1.0)), np.where(flat, 0.5, 0.0))
        return ng.div(ng.sub(psi, lo), ng.sub(hi, lo))

    def soft_graph(self, a, tau, temperature):
        """Soft indicator node (B, H, W); ``tau`` is a node of shape (B,)."""
        pt = self.normalize_graph(self.field_graph(a))
        z = ng.mul(ng.sub(pt, ng.reshape(tau, (-1, 1, 1))), 1.0 / temperature)
        return ng.sigmoid(z)

    def hard(self, a, tau):
        a = np.asarray(a, dtype=float)
        psi = self.cy.T @ np.swapaxes(a, -1, -2) @ self.cx - self.sy.T @ np.swapaxes(a, -1, -2) @ self.sx
        pt = range_normalize(psi)
        return threshold_hard(pt, np.asarray(tau, dtype=float).reshape(-1, 1, 1) if np.ndim(tau) else tau)
