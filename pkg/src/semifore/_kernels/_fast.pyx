# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled integration kernels for the L96 model family.

Semantics match ``_numpy_impl`` exactly (same stage ordering, same noise
consumption) so the two backends are interchangeable.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport M_PI, sin

cnp.import_array()

cdef double L63_SIGMA = 10.0
cdef double L63_RHO = 28.0
cdef double L63_BETA = 8.0 / 3.0


cdef void _adv_rhs(double[:, ::1] x, double[:, ::1] theta, double forcing,
                   double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t K = x.shape[0], n = x.shape[1], k, i, im1, im2, ip1
    for k in range(K):
        for i in range(n):
            im1 = i - 1 if i >= 1 else n - 1
            im2 = i - 2 if i >= 2 else i - 2 + n
            ip1 = i + 1 if i < n - 1 else 0
            out[k, i] = (theta[k, i] * (x[k, im1] * x[k, ip1])
                         - x[k, im1] * x[k, im2] - x[k, i] + forcing)


cdef void _rk4_theta_inplace(double[:, ::1] x, double[:, ::1] theta, double forcing,
                             double h, int nsub, double[:, ::1] k1, double[:, ::1] k2,
                             double[:, ::1] k3, double[:, ::1] k4,
                             double[:, ::1] tmp) noexcept nogil:
    cdef Py_ssize_t K = x.shape[0], n = x.shape[1], k, i
    cdef int s
    cdef double hh = 0.5 * h, h6 = h / 6.0
    for s in range(nsub):
        _adv_rhs(x, theta, forcing, k1)
        for k in range(K):
            for i in range(n):
                tmp[k, i] = x[k, i] + hh * k1[k, i]
        _adv_rhs(tmp, theta, forcing, k2)
        for k in range(K):
            for i in range(n):
                tmp[k, i] = x[k, i] + hh * k2[k, i]
        _adv_rhs(tmp, theta, forcing, k3)
        for k in range(K):
            for i in range(n):
                tmp[k, i] = x[k, i] + h * k3[k, i]
        _adv_rhs(tmp, theta, forcing, k4)
        for k in range(K):
            for i in range(n):
                x[k, i] = x[k, i] + h6 * (k1[k, i] + 2.0 * k2[k, i]
                                          + 2.0 * k3[k, i] + k4[k, i])


def l96_theta_rhs(x, theta_site, forcing):
    """Lorenz-96 tendency with a per-site advection coefficient."""
    cdef cnp.ndarray[double, ndim=2] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] ta = np.ascontiguousarray(theta_site, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] out = np.empty_like(xa)
    _adv_rhs(xa, ta, forcing, out)
    return out


def rk4_l96_theta(x, theta_site, forcing, double h, int nsub):
    """Advance an ensemble through ``nsub`` RK4 steps with frozen theta."""
    cdef cnp.ndarray[double, ndim=2] xa = np.array(x, dtype=np.float64, order="C")
    cdef cnp.ndarray[double, ndim=2] ta = np.ascontiguousarray(theta_site, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] k1 = np.empty_like(xa)
    cdef cnp.ndarray[double, ndim=2] k2 = np.empty_like(xa)
    cdef cnp.ndarray[double, ndim=2] k3 = np.empty_like(xa)
    cdef cnp.ndarray[double, ndim=2] k4 = np.empty_like(xa)
    cdef cnp.ndarray[double, ndim=2] tmp = np.empty_like(xa)
    _rk4_theta_inplace(xa, ta, forcing, h, nsub, k1, k2, k3, k4, tmp)
    return xa


cdef void _l96l63_rhs(double[:, ::1] z, double eps, double forcing,
                      double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t K = z.shape[0], d = z.shape[1], n = d - 3, k, i, im1, im2, ip1
    cdef double theta, a0, a1, a2
    for k in range(K):
        a0 = z[k, n]
        a1 = z[k, n + 1]
        a2 = z[k, n + 2]
        theta = a0 / 40.0 + 1.0
        for i in range(n):
            im1 = i - 1 if i >= 1 else n - 1
            im2 = i - 2 if i >= 2 else i - 2 + n
            ip1 = i + 1 if i < n - 1 else 0
            out[k, i] = (theta * (z[k, im1] * z[k, ip1])
                         - z[k, im1] * z[k, im2] - z[k, i] + forcing)
        out[k, n] = L63_SIGMA * (a1 - a0) / eps
        out[k, n + 1] = (L63_RHO * a0 - a1 - a0 * a2) / eps
        out[k, n + 2] = (a0 * a1 - L63_BETA * a2) / eps


def rk4_l96l63(z, double eps, double forcing, double h, int nsub):
    """Advance the coupled L96-L63 extended state through RK4 steps."""
    cdef cnp.ndarray[double, ndim=2] za = np.array(z, dtype=np.float64, order="C")
    cdef cnp.ndarray[double, ndim=2] k1 = np.empty_like(za)
    cdef cnp.ndarray[double, ndim=2] k2 = np.empty_like(za)
    cdef cnp.ndarray[double, ndim=2] k3 = np.empty_like(za)
    cdef cnp.ndarray[double, ndim=2] k4 = np.empty_like(za)
    cdef cnp.ndarray[double, ndim=2] tmp = np.empty_like(za)
    cdef double[:, ::1] zv = za, k1v = k1, k2v = k2, k3v = k3, k4v = k4, tv = tmp
    cdef Py_ssize_t K = za.shape[0], d = za.shape[1], k, i
    cdef int s
    cdef double hh = 0.5 * h, h6 = h / 6.0
    with nogil:
        for s in range(nsub):
            _l96l63_rhs(zv, eps, forcing, k1v)
            for k in range(K):
                for i in range(d):
                    tv[k, i] = zv[k, i] + hh * k1v[k, i]
            _l96l63_rhs(tv, eps, forcing, k2v)
            for k in range(K):
                for i in range(d):
                    tv[k, i] = zv[k, i] + hh * k2v[k, i]
            _l96l63_rhs(tv, eps, forcing, k3v)
            for k in range(K):
                for i in range(d):
                    tv[k, i] = zv[k, i] + h * k3v[k, i]
            _l96l63_rhs(tv, eps, forcing, k4v)
            for k in range(K):
                for i in range(d):
                    zv[k, i] = zv[k, i] + h6 * (k1v[k, i] + 2.0 * k2v[k, i]
                                                + 2.0 * k3v[k, i] + k4v[k, i])
    return za


def theta_from_gamma(gamma):
    """Map the latent angle to the four blockwise advection parameters."""
    gamma = np.asarray(gamma, dtype=np.float64)
    j = np.arange(1, 5, dtype=np.float64)
    return 1.0 + 0.3 * np.sin(gamma[..., None] + (np.pi / 4.0) * j)


def step_l96_stochastic(z, double eps, double forcing, double h, int nsub, noise):
    """Advance the L96-stochastic extended state (x, gamma).

    Per substep: x takes one RK4 step with theta(gamma) frozen, then gamma
    takes one Euler-Maruyama step consuming one column of ``noise``.
    """
    cdef cnp.ndarray[double, ndim=2] za = np.array(z, dtype=np.float64, order="C")
    cdef cnp.ndarray[double, ndim=2] xi = np.ascontiguousarray(noise, dtype=np.float64)
    cdef Py_ssize_t K = za.shape[0], d = za.shape[1], n = d - 1, k, i, b
    cdef Py_ssize_t block = n // 4
    cdef cnp.ndarray[double, ndim=2] x = np.ascontiguousarray(za[:, :n])
    cdef cnp.ndarray[double, ndim=1] gamma = np.ascontiguousarray(za[:, n])
    cdef cnp.ndarray[double, ndim=2] theta = np.empty((K, n), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] k1 = np.empty_like(x)
    cdef cnp.ndarray[double, ndim=2] k2 = np.empty_like(x)
    cdef cnp.ndarray[double, ndim=2] k3 = np.empty_like(x)
    cdef cnp.ndarray[double, ndim=2] k4 = np.empty_like(x)
    cdef cnp.ndarray[double, ndim=2] tmp = np.empty_like(x)
    cdef double[:, ::1] xv = x, thv = theta, k1v = k1, k2v = k2, k3v = k3, k4v = k4, tv = tmp
    cdef double[:, ::1] xiv = xi
    cdef double[::1] gv = gamma
    cdef int s
    cdef double amp = (0.1 / eps * h) ** 0.5
    cdef double hh = 0.5 * h, h6 = h / 6.0
    with nogil:
        for s in range(nsub):
            for k in range(K):
                for b in range(4):
                    for i in range(block):
                        thv[k, b * block + i] = 1.0 + 0.3 * sin(gv[k] + (M_PI / 4.0) * (b + 1))
            _adv_rhs(xv, thv, forcing, k1v)
            for k in range(K):
                for i in range(n):
                    tv[k, i] = xv[k, i] + hh * k1v[k, i]
            _adv_rhs(tv, thv, forcing, k2v)
            for k in range(K):
                for i in range(n):
                    tv[k, i] = xv[k, i] + hh * k2v[k, i]
            _adv_rhs(tv, thv, forcing, k3v)
            for k in range(K):
                for i in range(n):
                    tv[k, i] = xv[k, i] + h * k3v[k, i]
            _adv_rhs(tv, thv, forcing, k4v)
            for k in range(K):
                for i in range(n):
                    xv[k, i] = xv[k, i] + h6 * (k1v[k, i] + 2.0 * k2v[k, i]
                                                + 2.0 * k3v[k, i] + k4v[k, i])
            for k in range(K):
                gv[k] = gv[k] + h * (-(2.0 - sin(2.0 * gv[k]) / 2.0) / eps) + amp * xiv[k, s]
    cdef cnp.ndarray[double, ndim=2] out = np.empty_like(za)
    out[:, :n] = x
    out[:, n] = gamma
    return out
