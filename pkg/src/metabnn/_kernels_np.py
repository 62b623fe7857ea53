"""Pure-numpy kernels: the reference implementation the compiled extension
must match.

Expression structure is kept deliberately simple (one rounding per binary
op, no fused multiply-add) so the compiled backend, built with
-ffp-contract=off, reproduces the same floating-point results for every
operation except tanh, where numpy's SIMD polynomial and libm may differ
in the last ulp.

All functions take flat 1-D arrays; shape handling lives in
`metabnn.backend`.
"""

import numpy as np


def binarize(w, out):
    np.copyto(out, np.where(w < 0, w.dtype.type(-1.0), w.dtype.type(1.0)))


def adam_step(m1, m2, g, out, beta1, beta2, eps, t):
    m1 *= beta1
    m1 += (1.0 - beta1) * g
    m2 *= beta2
    m2 += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    np.divide(m2, bc2, out=out)
    np.sqrt(out, out=out)
    out += eps
    np.divide(m1 / bc1, out, out=out)


def metaplastic_update(w, u, m, eta):
    th = np.tanh(m * w)
    fm = 1.0 - th * th
    attenuated = (u * w) > 0.0
    step = eta * u
    step[attenuated] *= fm[attenuated]
    w -= step


def plain_update(w, u, eta):
    w -= eta * u


def hardtanh_gate(dy, y, out):
    np.multiply(dy, np.abs(y) <= 1.0, out=out)


def ewc_accum(g, w, anchor, fisher, lam):
    g += (lam * fisher) * (w - anchor)
