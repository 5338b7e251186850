# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled same-padding, stride-1 2-D convolution kernels.

All arrays are C-contiguous; ``x`` is (N, Ci, H, W) and ``w`` is (Co, Ci, k, k)
with odd ``k``. Results are written into caller-provided output buffers.

Each image is copied into a zero-padded plane of width W + k - 1 and the
output is accumulated in the same padded-width layout, so every kernel tap
becomes one long contiguous multiply-add over H * (W + k - 1) elements
instead of H short row loops. The surplus columns are dropped at the end.
"""

import numpy as np


cdef extern from *:
    """
    #if defined(__SSE__) || defined(_M_X64)
    #include <xmmintrin.h>
    static unsigned int scai_ftz_on(void) {
        unsigned int old = _mm_getcsr();
        _mm_setcsr(old | 0x8040);
        return old;
    }
    static void scai_ftz_off(unsigned int old) { _mm_setcsr(old); }
    #else
    static unsigned int scai_ftz_on(void) { return 0; }
    static void scai_ftz_off(unsigned int old) { (void)old; }
    #endif
    """
    # subnormal operands are flushed to zero inside the kernels; heatmap
    # tails otherwise make the multiply-adds many times slower
    unsigned int scai_ftz_on() nogil
    void scai_ftz_off(unsigned int old) nogil


ctypedef fused real:
    float
    double


cdef void _pad_image(real[:, :, ::1] src, real[:, ::1] dst, Py_ssize_t p, Py_ssize_t Wp) noexcept nogil:
    cdef Py_ssize_t c, y, x
    cdef Py_ssize_t H = src.shape[1], W = src.shape[2]
    for c in range(src.shape[0]):
        for y in range(H):
            for x in range(W):
                dst[c, (y + p) * Wp + x + p] = src[c, y, x]


cdef void _taps(real* a, real* s, real* wk, Py_ssize_t k, Py_ssize_t L) noexcept nogil:
    """a[i] += sum_j wk[j] * s[i + j] for i < L."""
    cdef Py_ssize_t i, j
    cdef real w0, w1, w2, w3, w4, t
    if k == 5:
        w0, w1, w2, w3, w4 = wk[0], wk[1], wk[2], wk[3], wk[4]
        for i in range(L):
            a[i] += w0 * s[i] + w1 * s[i + 1] + w2 * s[i + 2] + w3 * s[i + 3] + w4 * s[i + 4]
    elif k == 3:
        w0, w1, w2 = wk[0], wk[1], wk[2]
        for i in range(L):
            a[i] += w0 * s[i] + w1 * s[i + 1] + w2 * s[i + 2]
    else:
        for j in range(k):
            t = wk[j]
            for i in range(L):
                a[i] += t * s[i + j]


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                   real[:, :, :, ::1] out):
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[0], k = w.shape[2], p = k // 2
    cdef Py_ssize_t Wp = W + 2 * p, L = H * Wp
    cdef Py_ssize_t n, co, ci, ky, y, xx, i
    dt = np.float32 if real is float else np.float64
    cdef real[:, ::1] xp = np.zeros((Ci, (H + 2 * p) * Wp + k), dt)
    cdef real[:, ::1] acc = np.empty((Co, L), dt)
    cdef real* a
    cdef unsigned int csr
    with nogil:
        csr = scai_ftz_on()
        for n in range(N):
            _pad_image(x[n], xp, p, Wp)
            for co in range(Co):
                a = &acc[co, 0]
                for i in range(L):
                    a[i] = b[co]
                for ci in range(Ci):
                    for ky in range(k):
                        _taps(a, &xp[ci, ky * Wp], &w[co, ci, ky, 0], k, L)
                for y in range(H):
                    for xx in range(W):
                        out[n, co, y, xx] = a[y * Wp + xx]
        scai_ftz_off(csr)


cdef void _dots(real* g, real* s, real* gk, Py_ssize_t k, Py_ssize_t L) noexcept nogil:
    """gk[j] += sum_i g[i] * s[i + j] for j < k."""
    cdef Py_ssize_t i, j
    cdef real t0 = 0, t1 = 0, t2 = 0, t3 = 0, t4 = 0, gi
    if k == 5:
        for i in range(L):
            gi = g[i]
            t0 = t0 + gi * s[i]
            t1 = t1 + gi * s[i + 1]
            t2 = t2 + gi * s[i + 2]
            t3 = t3 + gi * s[i + 3]
            t4 = t4 + gi * s[i + 4]
        gk[0] += t0
        gk[1] += t1
        gk[2] += t2
        gk[3] += t3
        gk[4] += t4
    else:
        for j in range(k):
            t0 = 0
            for i in range(L):
                t0 = t0 + g[i] * s[i + j]
            gk[j] += t0


def conv2d_grad_input(real[:, :, :, ::1] gy, real[:, :, :, ::1] w,
                      real[:, :, :, ::1] gx):
    # correlation with the spatially flipped, channel-transposed kernel
    wf = np.ascontiguousarray(np.asarray(w)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    conv2d_forward(gy, wf, np.zeros(wf.shape[0], wf.dtype), gx)


def conv2d_grad_weight(real[:, :, :, ::1] x, real[:, :, :, ::1] gy,
                       real[:, :, :, ::1] gw, real[::1] gb):
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = gw.shape[0], k = gw.shape[2], p = k // 2
    cdef Py_ssize_t Wp = W + 2 * p, L = H * Wp
    cdef Py_ssize_t n, co, ci, ky, kx, y, xx
    cdef real s
    cdef unsigned int csr
    dt = np.float32 if real is float else np.float64
    cdef real[:, ::1] xp = np.zeros((Ci, (H + 2 * p) * Wp + k), dt)
    cdef real[:, ::1] gp = np.zeros((Co, L), dt)
    with nogil:
        csr = scai_ftz_on()
        for co in range(Co):
            gb[co] = 0
            for ci in range(Ci):
                for ky in range(k):
                    for kx in range(k):
                        gw[co, ci, ky, kx] = 0
        for n in range(N):
            _pad_image(x[n], xp, p, Wp)
            for co in range(Co):
                s = 0
                for y in range(H):
                    for xx in range(W):
                        gp[co, y * Wp + xx] = gy[n, co, y, xx]
                        s = s + gy[n, co, y, xx]
                gb[co] += s
                for ci in range(Ci):
                    for ky in range(k):
                        _dots(&gp[co, 0], &xp[ci, ky * Wp], &gw[co, ci, ky, 0], k, L)
        scai_ftz_off(csr)
