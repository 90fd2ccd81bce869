# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled cIoU threshold sweep.

One pass over the pixels buckets each pixel by how many thresholds it
exceeds; suffix sums then give the intersection and false-positive mass for
every threshold at once.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _count_below(const double[::1] taus, double x) nogil:
    # number of taus strictly below x (taus sorted ascending)
    cdef Py_ssize_t lo = 0, hi = taus.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if taus[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


def ciou_sweep(gt, pred, taus):
    cdef const double[:, ::1] g = np.ascontiguousarray(gt, dtype=np.float64)
    cdef const double[:, ::1] p = np.ascontiguousarray(pred, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(taus, dtype=np.float64)
    if g.shape[0] != p.shape[0] or g.shape[1] != p.shape[1]:
        raise ValueError("gt and pred shapes differ")
    cdef Py_ssize_t n_tau = t.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double gv, g_sum = 0.0
    cdef cnp.ndarray[cnp.float64_t, ndim=1] inter_hist = np.zeros(n_tau + 1)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fp_hist = np.zeros(n_tau + 1)
    cdef double[::1] ih = inter_hist
    cdef double[::1] fh = fp_hist
    with nogil:
        for i in range(g.shape[0]):
            for j in range(g.shape[1]):
                gv = g[i, j]
                g_sum += gv
                k = _count_below(t, p[i, j])
                if gv == 0.0:
                    fh[k] += 1.0
                else:
                    ih[k] += gv
    # pixel in bucket k is predicted positive for thresholds t[0..k-1]
    inter = np.cumsum(inter_hist[::-1])[::-1][1:]
    fp = np.cumsum(fp_hist[::-1])[::-1][1:]
    denom = g_sum + fp
    out = np.zeros(n_tau)
    np.divide(inter, denom, out=out, where=denom > 0)
    return out
