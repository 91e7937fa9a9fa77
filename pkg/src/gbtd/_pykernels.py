"""Pure-numpy convolution kernels, used when the compiled extension is absent.

Every output element is accumulated in the order (kernel row, kernel
column, input channel), starting from 0.0, exactly like the compiled
kernels, so both backends return identical values.
"""

import numpy as np

NAME = "python"


def grouped_conv2d(inp, kernels, stride, padding, threads=1):
    """Grouped 2-D cross-correlation with zero padding.

    ``inp`` has shape ``(w, h, R*p)`` and ``kernels`` shape
    ``(R, k1, k2, p, q)``; group ``r`` maps input channels
    ``r*p:(r+1)*p`` to output channels ``r*q:(r+1)*q``.
    """
    R, k1, k2, p, q = kernels.shape
    w, h, _ = inp.shape
    sx, sy = stride
    px, py = padding
    wo = (w + 2 * px - k1) // sx + 1
    ho = (h + 2 * py - k2) // sy + 1
    padded = np.zeros((w + 2 * px, h + 2 * py, R, p))
    padded[px : px + w, py : py + h] = inp.reshape(w, h, R, p)
    out = np.zeros((wo, ho, R, q))
    for a in range(k1):
        for b in range(k2):
            patch = padded[a : a + sx * (wo - 1) + 1 : sx, b : b + sy * (ho - 1) + 1 : sy]
            for m in range(p):
                out += patch[:, :, :, m, None] * kernels[:, a, b, m, :]
    return out.reshape(wo, ho, R * q)
