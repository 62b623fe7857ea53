# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise kernels for the training inner loop.

Each function mirrors its counterpart in `_kernels_np` operation for
operation (same expression structure, constants cast to the working
precision) so the two backends agree bitwise wherever IEEE arithmetic is
exact, and to within libm-vs-numpy ulp differences for tanh.

All kernels take flat contiguous views; shape handling lives in
`metabnn.backend`.
"""

from libc.math cimport fabs, fabsf, pow, sqrt, sqrtf, tanh, tanhf

ctypedef fused floating:
    float
    double


def binarize(floating[::1] w, floating[::1] out):
    cdef Py_ssize_t i, n = w.shape[0]
    for i in range(n):
        out[i] = 1.0 if w[i] >= 0.0 else -1.0


def adam_step(floating[::1] m1, floating[::1] m2, floating[::1] g,
              floating[::1] out, double beta1, double beta2, double eps,
              long t):
    """Advance first/second moments in place and write the bias-corrected
    direction m1hat / (sqrt(m2hat) + eps) to `out`. No learning rate."""
    cdef Py_ssize_t i, n = g.shape[0]
    cdef floating b1 = <floating> beta1
    cdef floating b2 = <floating> beta2
    cdef floating ob1 = <floating> (1.0 - beta1)
    cdef floating ob2 = <floating> (1.0 - beta2)
    cdef floating bc1 = <floating> (1.0 - pow(beta1, t))
    cdef floating bc2 = <floating> (1.0 - pow(beta2, t))
    cdef floating epsc = <floating> eps
    cdef floating root
    for i in range(n):
        m1[i] = b1 * m1[i] + ob1 * g[i]
        m2[i] = b2 * m2[i] + ob2 * (g[i] * g[i])
        if floating is float:
            root = sqrtf(m2[i] / bc2)
        else:
            root = sqrt(m2[i] / bc2)
        out[i] = (m1[i] / bc1) / (root + epsc)


def metaplastic_update(floating[::1] w, floating[::1] u, double m, double eta):
    """w -= eta * u * (1 - tanh^2(m*w)) where u*w > 0, else w -= eta * u.

    The attenuation factor is evaluated at the pre-update w. Strict
    inequality: the u*w == 0 boundary takes the plain branch.
    """
    cdef Py_ssize_t i, n = w.shape[0]
    cdef floating mc = <floating> m
    cdef floating etac = <floating> eta
    cdef floating th, fm
    for i in range(n):
        if u[i] * w[i] > 0.0:
            if floating is float:
                th = tanhf(mc * w[i])
            else:
                th = tanh(mc * w[i])
            fm = 1.0 - th * th
            w[i] = w[i] - (etac * u[i]) * fm
        else:
            w[i] = w[i] - etac * u[i]


def plain_update(floating[::1] w, floating[::1] u, double eta):
    cdef Py_ssize_t i, n = w.shape[0]
    cdef floating etac = <floating> eta
    for i in range(n):
        w[i] = w[i] - etac * u[i]


def hardtanh_gate(floating[::1] dy, floating[::1] y, floating[::1] out):
    """out = dy where |y| <= 1, else 0 (surrogate derivative of sign).
    Branchless so the compiler can vectorize the pass."""
    cdef Py_ssize_t i, n = dy.shape[0]
    for i in range(n):
        if floating is float:
            out[i] = dy[i] * <floating> (fabsf(y[i]) <= 1.0)
        else:
            out[i] = dy[i] * <floating> (fabs(y[i]) <= 1.0)


def ewc_accum(floating[::1] g, floating[::1] w, floating[::1] anchor,
              floating[::1] fisher, double lam):
    """g += lam * fisher * (w - anchor), in place."""
    cdef Py_ssize_t i, n = g.shape[0]
    cdef floating lamc = <floating> lam
    for i in range(n):
        g[i] = g[i] + (lamc * fisher[i]) * (w[i] - anchor[i])
