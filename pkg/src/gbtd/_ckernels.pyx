# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled grouped convolution.

Each output element sums its terms in (kernel row, kernel column, input
channel) order from 0.0; rows of the output are split across threads, so
the result does not depend on the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

NAME = "cython"


def grouped_conv2d(const double[:, :, ::1] inp, const double[:, :, :, :, ::1] kernels,
                   stride, padding, int threads=1):
    cdef Py_ssize_t R = kernels.shape[0], k1 = kernels.shape[1], k2 = kernels.shape[2]
    cdef Py_ssize_t p = kernels.shape[3], q = kernels.shape[4]
    cdef Py_ssize_t w = inp.shape[0], h = inp.shape[1]
    cdef Py_ssize_t sx = stride[0], sy = stride[1], px = padding[0], py = padding[1]
    cdef Py_ssize_t wo = (w + 2 * px - k1) // sx + 1
    cdef Py_ssize_t ho = (h + 2 * py - k2) // sy + 1
    out_arr = np.zeros((wo, ho, R * q))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t x, y, r, a, b, m, c, ix, iy
    cdef double u
    if threads < 1:
        threads = 1
    for x in prange(wo, nogil=True, schedule="static", num_threads=threads):
        for y in range(ho):
            for r in range(R):
                for a in range(k1):
                    ix = x * sx + a - px
                    if ix < 0 or ix >= w:
                        continue
                    for b in range(k2):
                        iy = y * sy + b - py
                        if iy < 0 or iy >= h:
                            continue
                        for m in range(p):
                            u = inp[ix, iy, r * p + m]
                            for c in range(q):
                                out[x, y, r * q + c] += u * kernels[r, a, b, m, c]
    return out_arr
