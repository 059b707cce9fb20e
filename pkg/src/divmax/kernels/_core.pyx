# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled inner loops: RBF Gram sums, brute-force kNN, ball margins."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def rbf_sum_grad(const double[:, ::1] A, const double[:, ::1] B, const double[::1] wa,
                 const double[::1] wb, double gamma, bint exclude_diag=False,
                 bint want_grad=True, bint symmetric=False):
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], d = A.shape[1]
    cdef Py_ssize_t i, j, c, jstart
    cdef double total = 0.0, dist2, diff, kij, coef, pair
    grad_arr = np.zeros((na if want_grad else 0, d), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    with nogil:
        for i in range(na):
            # symmetric: A is B with wa == wb, visit each unordered pair once
            jstart = i if symmetric else 0
            for j in range(jstart, nb):
                if i == j and (exclude_diag or symmetric):
                    if not exclude_diag:
                        total = total + wa[i] * wb[i]
                    continue
                dist2 = 0.0
                for c in range(d):
                    diff = A[i, c] - B[j, c]
                    dist2 = dist2 + diff * diff
                kij = exp(-gamma * dist2)
                pair = wa[i] * wb[j] * kij
                if symmetric:
                    total = total + 2.0 * pair
                else:
                    total = total + pair
                if want_grad:
                    coef = -2.0 * gamma * pair
                    for c in range(d):
                        diff = coef * (A[i, c] - B[j, c])
                        grad[i, c] = grad[i, c] + diff
                        if symmetric:
                            grad[j, c] = grad[j, c] - diff
    return total, (grad_arr if want_grad else None)


def knn_distances(const double[:, ::1] Q, const double[:, ::1] R, Py_ssize_t k,
                  bint exclude_self=False):
    cdef Py_ssize_t nq = Q.shape[0], nr = R.shape[0], d = Q.shape[1]
    cdef Py_ssize_t i, j, c, pos
    cdef double dist2, diff
    dist_arr = np.full((nq, k), np.inf, dtype=np.float64)
    idx_arr = np.full((nq, k), -1, dtype=np.intp)
    cdef double[:, ::1] best = dist_arr
    cdef Py_ssize_t[:, ::1] bidx = idx_arr
    with nogil:
        for i in range(nq):
            for j in range(nr):
                if exclude_self and i == j:
                    continue
                dist2 = 0.0
                for c in range(d):
                    diff = Q[i, c] - R[j, c]
                    dist2 = dist2 + diff * diff
                if dist2 >= best[i, k - 1]:
                    continue
                # insertion into the sorted k-buffer
                pos = k - 1
                while pos > 0 and best[i, pos - 1] > dist2:
                    best[i, pos] = best[i, pos - 1]
                    bidx[i, pos] = bidx[i, pos - 1]
                    pos = pos - 1
                best[i, pos] = dist2
                bidx[i, pos] = j
            for c in range(k):
                best[i, c] = sqrt(best[i, c])
    return dist_arr, idx_arr


def ball_margin(const double[:, ::1] Q, const double[:, ::1] C, const double[::1] radii):
    cdef Py_ssize_t nq = Q.shape[0], nc = C.shape[0], d = Q.shape[1]
    cdef Py_ssize_t i, j, c, arg
    cdef double dist2, diff, m, bestm
    margin_arr = np.empty(nq, dtype=np.float64)
    arg_arr = np.empty(nq, dtype=np.intp)
    cdef double[::1] margin = margin_arr
    cdef Py_ssize_t[::1] argm = arg_arr
    with nogil:
        for i in range(nq):
            bestm = INFINITY
            arg = 0
            for j in range(nc):
                dist2 = 0.0
                for c in range(d):
                    diff = Q[i, c] - C[j, c]
                    dist2 = dist2 + diff * diff
                m = sqrt(dist2) - radii[j]
                if m < bestm:
                    bestm = m
                    arg = j
            margin[i] = bestm
            argm[i] = arg
    return margin_arr, arg_arr
