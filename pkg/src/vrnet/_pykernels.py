"""NumPy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors them one to
one. Both return identical results up to floating point summation order.
"""
import numpy as np
from scipy import ndimage

# Node order inside one pixel element: (r, c), (r, c+1), (r+1, c), (r+1, c+1)
# i.e. 00, 10, 01, 11 in (x1, x2) offsets. Element dofs: 4 x u1, then 4 x u2.


def _gather(u):
    u10 = np.roll(u, -1, axis=-1)
    u01 = np.roll(u, -1, axis=-2)
    u11 = np.roll(u01, -1, axis=-1)
    return np.stack(
        [u[:, 0], u10[:, 0], u01[:, 0], u11[:, 0],
         u[:, 1], u10[:, 1], u01[:, 1], u11[:, 1]],
        axis=1,
    )


def _scatter(fe):
    out = np.empty(fe.shape[:1] + (2,) + fe.shape[2:])
    for k in range(2):
        f = fe[:, 4 * k]
        f = f + np.roll(fe[:, 4 * k + 1], 1, axis=-1)
        f = f + np.roll(fe[:, 4 * k + 2], 1, axis=-2)
        f = f + np.roll(np.roll(fe[:, 4 * k + 3], 1, axis=-1), 1, axis=-2)
        out[:, k] = f
    return out


def fe_apply(u, phase, ke):
    """Apply the assembled periodic stiffness operator.

    Parameters
    ----------
    u : ndarray, shape (nrhs, 2, N2, N1)
        Nodal displacement fluctuations.
    phase : ndarray of uint8, shape (N2, N1)
        Phase index of every pixel element.
    ke : ndarray, shape (nphase, 8, 8)
        Element stiffness matrix per phase.

    Returns
    -------
    ndarray, shape (nrhs, 2, N2, N1)
    """
    ue = _gather(u)
    fe = np.einsum("ij,bjyx->biyx", ke[0], ue)
    for p in range(1, ke.shape[0]):
        mask = phase == p
        if mask.any():
            fe += mask * np.einsum("ij,bjyx->biyx", ke[p] - ke[0], ue)
    return _scatter(fe)


def jacobi_eigh(a, tol=1e-15, max_sweeps=60):
    """Cyclic Jacobi on a batch of symmetric matrices.

    Returns unsorted eigenvalues ``w`` (B, m) and eigenvector columns
    ``v`` (B, m, m).
    """
    a = np.array(a, dtype=float, copy=True)
    nb, m, _ = a.shape
    v = np.broadcast_to(np.eye(m), a.shape).copy()
    scale = np.sqrt(np.sum(a * a, axis=(1, 2)))
    iu = np.triu_indices(m, 1)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(a[:, iu[0], iu[1]] ** 2, axis=1))
        if np.all(off <= tol * scale):
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[:, p, q]
                active = apq != 0.0
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                t = np.where(theta >= 0.0, 1.0, -1.0) / (np.abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                ap = a[:, :, p].copy()
                aq = a[:, :, q]
                a[:, :, p] = c * ap - s * aq
                a[:, :, q] = s * ap + c * aq
                ap = a[:, p, :].copy()
                aq = a[:, q, :]
                a[:, p, :] = c * ap - s * aq
                a[:, q, :] = s * ap + c * aq
                a[active, p, q] = 0.0
                a[active, q, p] = 0.0
                vp = v[:, :, p].copy()
                vq = v[:, :, q]
                v[:, :, p] = c * vp - s * vq
                v[:, :, q] = s * vp + c * vq
    w = np.diagonal(a, axis1=1, axis2=2).copy()
    return w, v


def label_periodic(mask):
    """4-connected component labels on a periodic (torus) grid.

    Labels are 1..n in order of first appearance in raster order; 0 marks
    background.
    """
    mask = np.ascontiguousarray(mask, dtype=bool)
    lab, n = ndimage.label(mask)
    if n == 0:
        return lab.astype(np.int32), 0
    parent = list(range(n + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for a, b in zip(lab[:, 0], lab[:, -1]):
        if a and b:
            union(a, b)
    for a, b in zip(lab[0, :], lab[-1, :]):
        if a and b:
            union(a, b)
    roots = np.array([find(i) for i in range(n + 1)])
    merged = roots[lab]
    # renumber by first appearance in raster order
    flat = merged.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.unique(flat)[np.argsort(first)]
    remap = np.zeros(n + 1, dtype=np.int32)
    k = 0
    for r in order:
        if r == 0:
            continue
        k += 1
        remap[r] = k
    return remap[merged].astype(np.int32), k
