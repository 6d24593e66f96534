"""Pure-NumPy fallback for the hot integration kernels.

Mirrors the compiled extension exactly: same state layouts, same stage
ordering inside RK4, same noise consumption order. All functions accept
and return C-contiguous float64 arrays of shape (members, dim).
"""
import numpy as np

_L63_SIGMA = 10.0
_L63_RHO = 28.0
_L63_BETA = 8.0 / 3.0


def _advection(x, theta_site):
    xm1 = np.roll(x, 1, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return theta_site * (xm1 * xp1) - xm1 * xm2


def l96_theta_rhs(x, theta_site, forcing):
    """Lorenz-96 tendency with a per-site advection coefficient."""
    return _advection(x, theta_site) - x + forcing


def rk4_l96_theta(x, theta_site, forcing, h, nsub):
    """Advance an ensemble through ``nsub`` RK4 steps with frozen theta."""
    x = np.array(x, dtype=np.float64)
    for _ in range(nsub):
        k1 = l96_theta_rhs(x, theta_site, forcing)
        k2 = l96_theta_rhs(x + (0.5 * h) * k1, theta_site, forcing)
        k3 = l96_theta_rhs(x + (0.5 * h) * k2, theta_site, forcing)
        k4 = l96_theta_rhs(x + h * k3, theta_site, forcing)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def _l96l63_rhs(z, eps, forcing):
    x = z[:, :-3]
    a = z[:, -3:]
    theta = a[:, 0] / 40.0 + 1.0
    dx = _advection(x, theta[:, None]) - x + forcing
    da = np.empty_like(a)
    da[:, 0] = _L63_SIGMA * (a[:, 1] - a[:, 0]) / eps
    da[:, 1] = (_L63_RHO * a[:, 0] - a[:, 1] - a[:, 0] * a[:, 2]) / eps
    da[:, 2] = (a[:, 0] * a[:, 1] - _L63_BETA * a[:, 2]) / eps
    return np.concatenate([dx, da], axis=1)


def rk4_l96l63(z, eps, forcing, h, nsub):
    """Advance the coupled L96-L63 extended state through RK4 steps."""
    z = np.array(z, dtype=np.float64)
    for _ in range(nsub):
        k1 = _l96l63_rhs(z, eps, forcing)
        k2 = _l96l63_rhs(z + (0.5 * h) * k1, eps, forcing)
        k3 = _l96l63_rhs(z + (0.5 * h) * k2, eps, forcing)
        k4 = _l96l63_rhs(z + h * k3, eps, forcing)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return z


def theta_from_gamma(gamma):
    """Map the latent angle to the four blockwise advection parameters."""
    gamma = np.asarray(gamma, dtype=np.float64)
    j = np.arange(1, 5, dtype=np.float64)
    return 1.0 + 0.3 * np.sin(gamma[..., None] + (np.pi / 4.0) * j)


def step_l96_stochastic(z, eps, forcing, h, nsub, noise):
    """Advance the L96-stochastic extended state (x, gamma).

    Per substep: x takes one RK4 step with theta(gamma) frozen, then gamma
    takes one Euler-Maruyama step consuming one column of ``noise``
    (standard normals of shape (members, nsub)).
    """
    z = np.array(z, dtype=np.float64)
    x = z[:, :-1]
    gamma = z[:, -1].copy()
    n = x.shape[1]
    block = n // 4
    amp = np.sqrt(0.1 / eps * h)
    for s in range(nsub):
        theta_site = np.repeat(theta_from_gamma(gamma), block, axis=-1)
        k1 = l96_theta_rhs(x, theta_site, forcing)
        k2 = l96_theta_rhs(x + (0.5 * h) * k1, theta_site, forcing)
        k3 = l96_theta_rhs(x + (0.5 * h) * k2, theta_site, forcing)
        k4 = l96_theta_rhs(x + h * k3, theta_site, forcing)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        gamma = gamma + h * (-(2.0 - np.sin(2.0 * gamma) / 2.0) / eps) + amp * noise[:, s]
    out = np.empty_like(z)
    out[:, :-1] = x
    out[:, -1] = gamma
    return out
