# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (BLAS-backed implicit GEMM).

Mirrors ``_pykernels`` exactly: same padded-width layout, same tap order,
same per-sample partial buffers. The GIL is released for the whole batch so
callers may run disjoint batch slices on separate threads.

BLAS is column-major; a row-major [M, N] matrix with leading dimension ld
is the column-major [N, M] matrix with the same ld, hence the swapped
operand order in every call below.
"""
from scipy.linalg.cython_blas cimport sgemm, dgemm

NAME = "compiled"

cdef char _N = 78  # 'N'
cdef char _T = 84  # 'T'

ctypedef fused real:
    float
    double


cdef inline void _gemm(char ta, char tb, int m, int n, int k, real alpha,
                       const real* a, int lda, const real* b, int ldb, real beta,
                       real* c, int ldc) noexcept nogil:
    if real is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, <float*>a, &lda, <float*>b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, <double*>a, &lda, <double*>b, &ldb, &beta, c, &ldc)


def forward(const real[:, :, :, ::1] xpad, const real[:, :, :, ::1] taps, int H, int W,
            real[:, :, ::1] out):
    cdef int B = xpad.shape[0], C = xpad.shape[1], Hp = xpad.shape[2], Wp = xpad.shape[3]
    cdef int r = taps.shape[0], O = taps.shape[2]
    cdef int n = (H - 1) * Wp + W, plane = Hp * Wp, ldo = out.shape[2]
    cdef int b, kh, kw
    cdef real one = 1
    cdef const real* xb
    with nogil:
        for b in range(B):
            xb = &xpad[b, 0, 0, 0]
            for kh in range(r):
                for kw in range(r):
                    # out[b] (O x n) += taps[kh, kw] (O x C) @ window (C x n)
                    _gemm(_N, _N, n, O, C, one, xb + kh * Wp + kw, plane,
                          &taps[kh, kw, 0, 0], C, one, &out[b, 0, 0], ldo)
    return B * r * r


def wgrad(const real[:, :, :, ::1] xpad, const real[:, :, ::1] gpad, int H, int W, int r,
          real[:, :, :, :, ::1] out):
    cdef int B = xpad.shape[0], C = xpad.shape[1], Hp = xpad.shape[2], Wp = xpad.shape[3]
    cdef int O = gpad.shape[1], ldg = gpad.shape[2]
    cdef int n = (H - 1) * Wp + W, plane = Hp * Wp
    cdef int b, kh, kw
    cdef real one = 1, zero = 0
    cdef const real* xb
    with nogil:
        for b in range(B):
            xb = &xpad[b, 0, 0, 0]
            for kh in range(r):
                for kw in range(r):
                    # out[b, kh, kw] (O x C) = gpad[b] (O x n) @ window^T (n x C)
                    _gemm(_T, _N, C, O, n, one, xb + kh * Wp + kw, plane,
                          &gpad[b, 0, 0], ldg, zero, &out[b, kh, kw, 0, 0], C)
    return B * r * r


def igrad(const real[:, :, ::1] gpad, const real[:, :, :, ::1] taps, int H, int W,
          real[:, :, :, ::1] gxpad):
    cdef int B = gxpad.shape[0], C = gxpad.shape[1], Hp = gxpad.shape[2], Wp = gxpad.shape[3]
    cdef int r = taps.shape[0], O = taps.shape[2], ldg = gpad.shape[2]
    cdef int n = (H - 1) * Wp + W, plane = Hp * Wp
    cdef int b, kh, kw
    cdef real one = 1
    cdef real* gb
    with nogil:
        for b in range(B):
            gb = &gxpad[b, 0, 0, 0]
            for kh in range(r):
                for kw in range(r):
                    # window(gx[b]) (C x n) += taps[kh, kw]^T (C x O) @ gpad[b] (O x n)
                    _gemm(_N, _T, n, C, O, one, &gpad[b, 0, 0], ldg,
                          &taps[kh, kw, 0, 0], C, one, gb + kh * Wp + kw, plane)
    return B * r * r
