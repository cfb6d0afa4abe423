# cython: language_level=3
"""Compiled inner loops. Contract mirrors :mod:`vmrec._pykernels`.

All reductions run in a fixed sequential order so results are
bit-reproducible for a given input.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def sq_dist(const double[:, ::1] E1, const double[:, ::1] E2):
    cdef Py_ssize_t n1 = E1.shape[0], n2 = E2.shape[0], d = E1.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    out = np.empty((n1, n2), dtype=np.float64)
    cdef double[:, ::1] D = out
    with nogil:
        for i in range(n1):
            for j in range(n2):
                acc = 0.0
                for k in range(d):
                    diff = E1[i, k] - E2[j, k]
                    acc = acc + diff * diff
                D[i, j] = acc
    return out


def hinge_all_pairs(const double[:, ::1] D, double margin):
    cdef Py_ssize_t b = D.shape[0]
    cdef Py_ssize_t i, j
    cdef double total = 0.0, v, pos
    cdef double inv = 1.0 / (<double>b * <double>(b - 1))
    out = np.zeros((b, b), dtype=np.float64)
    cdef double[:, ::1] G = out
    with nogil:
        for i in range(b):
            pos = D[i, i]
            for j in range(b):
                if j == i:
                    continue
                v = pos - D[i, j] + margin
                if v > 0.0:
                    total = total + v
                    G[i, j] = G[i, j] - inv
                    G[i, i] = G[i, i] + inv
    return total * inv, out


def hinge_triples(const double[:, ::1] E, const long long[::1] a,
                  const long long[::1] p, const long long[::1] n, double margin):
    cdef Py_ssize_t t_count = a.shape[0], d = E.shape[1]
    cdef Py_ssize_t t, k, ia, ip, ineg
    cdef double total = 0.0, dap, dan, diff, v, inv, ga, gp
    out = np.zeros((E.shape[0], d), dtype=np.float64)
    cdef double[:, ::1] dE = out
    if t_count == 0:
        return 0.0, out
    inv = 1.0 / <double>t_count
    with nogil:
        for t in range(t_count):
            ia = a[t]
            ip = p[t]
            ineg = n[t]
            dap = 0.0
            dan = 0.0
            for k in range(d):
                diff = E[ia, k] - E[ip, k]
                dap = dap + diff * diff
                diff = E[ia, k] - E[ineg, k]
                dan = dan + diff * diff
            v = dap - dan + margin
            if v > 0.0:
                total = total + v
                for k in range(d):
                    ga = 2.0 * inv * (E[ia, k] - E[ip, k])
                    gp = 2.0 * inv * (E[ia, k] - E[ineg, k])
                    dE[ia, k] = dE[ia, k] + ga - gp
                    dE[ip, k] = dE[ip, k] - ga
                    dE[ineg, k] = dE[ineg, k] + gp
    return total * inv, out


def gt_ranks(const double[:, ::1] S, const long long[::1] gt, bint descending):
    cdef Py_ssize_t q = S.shape[0], m = S.shape[1]
    cdef Py_ssize_t i, j, g
    cdef long long r
    cdef double s_gt, s
    out = np.empty(q, dtype=np.int64)
    cdef long long[::1] R = out
    with nogil:
        for i in range(q):
            g = gt[i]
            s_gt = S[i, g]
            r = 1
            for j in range(m):
                s = S[i, j]
                if descending:
                    if s > s_gt or (s == s_gt and j < g):
                        r = r + 1
                else:
                    if s < s_gt or (s == s_gt and j < g):
                        r = r + 1
            R[i] = r
    return out
