# cython: language_level=3
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, hypot

cnp.import_array()


def fe_apply(const double[:, :, :, ::1] u, const unsigned char[:, ::1] phase,
             const double[:, :, ::1] ke):
    cdef Py_ssize_t nrhs = u.shape[0], n2 = u.shape[2], n1 = u.shape[3]
    cdef Py_ssize_t b, r, c, rp, cp, i, j, p
    cdef double ue[8]
    cdef double fe[8]
    cdef double acc
    out_arr = np.zeros((nrhs, 2, n2, n1))
    cdef double[:, :, :, ::1] out = out_arr
    for b in range(nrhs):
        for r in range(n2):
            rp = r + 1
            if rp == n2:
                rp = 0
            for c in range(n1):
                cp = c + 1
                if cp == n1:
                    cp = 0
                ue[0] = u[b, 0, r, c]
                ue[1] = u[b, 0, r, cp]
                ue[2] = u[b, 0, rp, c]
                ue[3] = u[b, 0, rp, cp]
                ue[4] = u[b, 1, r, c]
                ue[5] = u[b, 1, r, cp]
                ue[6] = u[b, 1, rp, c]
                ue[7] = u[b, 1, rp, cp]
                p = phase[r, c]
                for i in range(8):
                    acc = 0.0
                    for j in range(8):
                        acc = acc + ke[p, i, j] * ue[j]
                    fe[i] = acc
                out[b, 0, r, c] += fe[0]
                out[b, 0, r, cp] += fe[1]
                out[b, 0, rp, c] += fe[2]
                out[b, 0, rp, cp] += fe[3]
                out[b, 1, r, c] += fe[4]
                out[b, 1, r, cp] += fe[5]
                out[b, 1, rp, c] += fe[6]
                out[b, 1, rp, cp] += fe[7]
    return out_arr


def jacobi_eigh(a_in, double tol=1e-15, int max_sweeps=60):
    a_arr = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] a = a_arr
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1]
    v_arr = np.zeros((nb, m, m))
    cdef double[:, :, ::1] v = v_arr
    w_arr = np.empty((nb, m))
    cdef double[:, ::1] w = w_arr
    cdef Py_ssize_t k, p, q, i, sweep
    cdef double scale, off, apq, theta, t, cs, sn, x, y
    for k in range(nb):
        for i in range(m):
            v[k, i, i] = 1.0
        scale = 0.0
        for p in range(m):
            for q in range(m):
                scale += a[k, p, q] * a[k, p, q]
        scale = sqrt(scale)
        for sweep in range(max_sweeps):
            off = 0.0
            for p in range(m - 1):
                for q in range(p + 1, m):
                    off += a[k, p, q] * a[k, p, q]
            off = sqrt(2.0 * off)
            if off <= tol * scale:
                break
            for p in range(m - 1):
                for q in range(p + 1, m):
                    apq = a[k, p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[k, q, q] - a[k, p, p]) / (2.0 * apq)
                    if theta >= 0.0:
                        t = 1.0 / (fabs(theta) + hypot(1.0, theta))
                    else:
                        t = -1.0 / (fabs(theta) + hypot(1.0, theta))
                    cs = 1.0 / sqrt(1.0 + t * t)
                    sn = t * cs
                    for i in range(m):
                        x = a[k, i, p]
                        y = a[k, i, q]
                        a[k, i, p] = cs * x - sn * y
                        a[k, i, q] = sn * x + cs * y
                    for i in range(m):
                        x = a[k, p, i]
                        y = a[k, q, i]
                        a[k, p, i] = cs * x - sn * y
                        a[k, q, i] = sn * x + cs * y
                    a[k, p, q] = 0.0
                    a[k, q, p] = 0.0
                    for i in range(m):
                        x = v[k, i, p]
                        y = v[k, i, q]
                        v[k, i, p] = cs * x - sn * y
                        v[k, i, q] = sn * x + cs * y
        for i in range(m):
            w[k, i] = a[k, i, i]
    return w_arr, v_arr


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


cdef void _union(Py_ssize_t[::1] parent, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t ri = _find(parent, i), rj = _find(parent, j)
    if ri < rj:
        parent[rj] = ri
    elif rj < ri:
        parent[ri] = rj


def label_periodic(mask_in):
    mask_arr = np.ascontiguousarray(mask_in, dtype=np.uint8)
    cdef const unsigned char[:, ::1] mask = mask_arr
    cdef Py_ssize_t n2 = mask.shape[0], n1 = mask.shape[1]
    cdef Py_ssize_t r, c, i, rp, cp, root
    parent_arr = np.arange(n2 * n1, dtype=np.intp)
    cdef Py_ssize_t[::1] parent = parent_arr
    for r in range(n2):
        rp = r + 1
        if rp == n2:
            rp = 0
        for c in range(n1):
            if not mask[r, c]:
                continue
            cp = c + 1
            if cp == n1:
                cp = 0
            if mask[r, cp]:
                _union(parent, r * n1 + c, r * n1 + cp)
            if mask[rp, c]:
                _union(parent, r * n1 + c, rp * n1 + c)
    labels_arr = np.zeros((n2, n1), dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    remap_arr = np.zeros(n2 * n1, dtype=np.int32)
    cdef int[::1] remap = remap_arr
    cdef int count = 0
    for r in range(n2):
        for c in range(n1):
            if not mask[r, c]:
                continue
            root = _find(parent, r * n1 + c)
            if remap[root] == 0:
                count += 1
                remap[root] = count
            labels[r, c] = remap[root]
    return labels_arr, count
