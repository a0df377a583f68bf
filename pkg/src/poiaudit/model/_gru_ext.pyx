# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU recurrence and fused Adam update. Same contract as ``_gru_py``."""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef extern from "_gru_core.h" nogil:
    void pa_gru_fwd_row(int H, const double *a, const double *c, const double *h, double *z,
                        double *r, double *n, double *cn, double *hout)
    void pa_gru_bwd_row(int H, double *g, const double *z, const double *r, const double *n,
                        const double *cn, const double *h, double *da, double *dc)
    void pa_adam(long n, double *w, const double *g, double *m, double *v, double lr, double b1,
                 double b2, double eps, double c1, double c2)


def gru_forward(A_in, h0_in, Wh_in, mask_in):
    cdef double[:, :, ::1] A = np.ascontiguousarray(A_in, dtype=np.float64)
    cdef double[:, ::1] Wh = np.ascontiguousarray(Wh_in, dtype=np.float64)
    cdef double[:, ::1] mask = np.ascontiguousarray(mask_in, dtype=np.float64)
    cdef int T = A.shape[0], B = A.shape[1], G = A.shape[2]
    cdef int H = G // 3
    Hs_np = np.empty((T + 1, B, H))
    Z_np = np.empty((T, B, H))
    R_np = np.empty((T, B, H))
    N_np = np.empty((T, B, H))
    Cn_np = np.empty((T, B, H))
    C_np = np.empty((B, G))
    Hs_np[0] = h0_in
    cdef double[:, :, ::1] Hs = Hs_np
    cdef double[:, :, ::1] Z = Z_np
    cdef double[:, :, ::1] R = R_np
    cdef double[:, :, ::1] N = N_np
    cdef double[:, :, ::1] Cn = Cn_np
    cdef double[:, ::1] C = C_np
    cdef int t, b, j
    cdef double one = 1.0, zero = 0.0
    cdef char transn = b'N'
    if T == 0 or B == 0:
        return Hs_np, Z_np, R_np, N_np, Cn_np
    with nogil:
        for t in range(T):
            dgemm(&transn, &transn, &G, &B, &H, &one, &Wh[0, 0], &G,
                  &Hs[t, 0, 0], &H, &zero, &C[0, 0], &G)
            for b in range(B):
                pa_gru_fwd_row(H, &A[t, b, 0], &C[b, 0], &Hs[t, b, 0], &Z[t, b, 0],
                               &R[t, b, 0], &N[t, b, 0], &Cn[t, b, 0], &Hs[t + 1, b, 0])
                if not mask[t, b] > 0:
                    for j in range(H):
                        Hs[t + 1, b, j] = Hs[t, b, j]
    return Hs_np, Z_np, R_np, N_np, Cn_np


def gru_backward(dHs_in, Hs_in, Z_in, R_in, N_in, Cn_in, Wh_in, mask_in):
    cdef double[:, :, ::1] dHs = np.ascontiguousarray(dHs_in, dtype=np.float64)
    cdef double[:, :, ::1] Hs = np.ascontiguousarray(Hs_in, dtype=np.float64)
    cdef double[:, :, ::1] Z = np.ascontiguousarray(Z_in, dtype=np.float64)
    cdef double[:, :, ::1] R = np.ascontiguousarray(R_in, dtype=np.float64)
    cdef double[:, :, ::1] N = np.ascontiguousarray(N_in, dtype=np.float64)
    cdef double[:, :, ::1] Cn = np.ascontiguousarray(Cn_in, dtype=np.float64)
    cdef double[:, ::1] Wh = np.ascontiguousarray(Wh_in, dtype=np.float64)
    cdef double[:, ::1] mask = np.ascontiguousarray(mask_in, dtype=np.float64)
    cdef int T = dHs.shape[0], B = dHs.shape[1], H = dHs.shape[2]
    cdef int G = 3 * H
    dA_np = np.zeros((T, B, G))
    dC_np = np.zeros((T, B, G))
    dh_np = np.zeros((B, H))
    cdef double[:, :, ::1] dA = dA_np
    cdef double[:, :, ::1] dC = dC_np
    cdef double[:, ::1] dh = dh_np
    cdef int t, b, j
    cdef double one = 1.0
    cdef char transn = b'N'
    cdef char transt = b'T'
    if T == 0 or B == 0:
        return dA_np, dC_np, dh_np
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    dh[b, j] = dh[b, j] + dHs[t, b, j]
                if mask[t, b] > 0:
                    pa_gru_bwd_row(H, &dh[b, 0], &Z[t, b, 0], &R[t, b, 0], &N[t, b, 0],
                                   &Cn[t, b, 0], &Hs[t, b, 0], &dA[t, b, 0], &dC[t, b, 0])
            dgemm(&transt, &transn, &H, &B, &G, &one, &Wh[0, 0], &G,
                  &dC[t, 0, 0], &G, &one, &dh[0, 0], &H)
    return dA_np, dC_np, dh_np


def adam_step(double[::1] w, const double[::1] g, double[::1] m, double[::1] v,
              double lr, double b1, double b2, double eps, long t):
    """In-place bias-corrected Adam update."""
    cdef long n = w.shape[0]
    cdef double c1 = 1.0 - b1 ** t
    cdef double c2 = 1.0 - b2 ** t
    with nogil:
        pa_adam(n, &w[0], &g[0], &m[0], &v[0], lr, b1, b2, eps, c1, c2)
