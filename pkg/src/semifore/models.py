"""Twin-experiment dynamical systems and their integrators.

Systems: the 40-site Lorenz-96 model, the L96-L63 system (Lorenz-96 whose
first advection coefficient is driven by a hidden Lorenz-63), the
L96-stochastic system (four blockwise advection parameters driven by a
noisy angle), and Ornstein-Uhlenbeck processes used for baselines and
synthetic tests.

Deterministic parts advance with classical RK4, stochastic parts with
Euler-Maruyama, both at the internal step ``h`` of
:class:`IntegratorConfig` (default h = 0.01, ten substeps per
observation interval tau = 0.1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import _kernels
from .errors import DegenerateDataError, DivergenceError, InsufficientDataError

DIVERGENCE_LIMIT = 1.0e6

L63_SIGMA = 10.0
L63_RHO = 28.0
L63_BETA = 8.0 / 3.0


# ---------------------------------------------------------------------------
# containers


@dataclass
class TimeSeries:
    """Uniformly sampled trajectory: ``values[i]`` is the state at t0 + i*dt."""

    values: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.ndim != 2:
            raise ValueError("TimeSeries values must be 1- or 2-dimensional")
        if self.dt <= 0:
            raise ValueError("sample interval must be positive")

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    def save_csv(self, path) -> None:
        header = "t," + ",".join(f"z_{i + 1}" for i in range(self.dim))
        data = np.column_stack([self.t, self.values])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def load_csv(cls, path) -> "TimeSeries":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0]
        if len(t) < 2:
            raise InsufficientDataError("need at least two samples to infer dt")
        return cls(values=data[:, 1:], dt=float(t[1] - t[0]), t0=float(t[0]))


@dataclass
class IntegratorConfig:
    """Internal step size and substep count for one observation interval."""

    h: float = 0.01
    tau: float = 0.1
    scheme: str = "rk4"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("step size h must be positive")
        sub = self.tau / self.h
        if abs(sub - round(sub)) > 1e-9:
            raise ValueError("h must divide the sampling interval tau exactly")
        if self.scheme not in ("rk4", "em"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def substeps(self) -> int:
        return int(round(self.tau / self.h))


@dataclass
class SdeSpec:
    """Ito SDE with state-independent, per-component noise amplitude."""

    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: np.ndarray
    dim: int

    def __post_init__(self):
        self.diffusion = np.broadcast_to(
            np.asarray(self.diffusion, dtype=float), (self.dim,)
        ).copy()
        if np.any(self.diffusion < 0):
            raise ValueError("diffusion amplitudes must be nonnegative")


# ---------------------------------------------------------------------------
# right-hand sides


def _site_theta(theta, shape):
    """Broadcast a scalar / per-member / blockwise theta to per-site values."""
    K, n = shape
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        return np.full((K, n), float(theta))
    if theta.ndim == 1:
        if theta.shape[0] == K:
            return np.repeat(theta[:, None], n, axis=1)
        theta = np.broadcast_to(theta, (K, theta.shape[0]))
    if theta.shape[1] == n:
        return np.ascontiguousarray(theta)
    if n % theta.shape[1] == 0:
        return np.repeat(theta, n // theta.shape[1], axis=1)
    raise ValueError(f"cannot map theta of shape {theta.shape} onto {n} sites")


def lorenz96_rhs(x: np.ndarray, forcing: float = 8.0) -> np.ndarray:
    """Tendency of the cyclic Lorenz-96 model."""
    return l96_theta_rhs(x, 1.0, forcing)


def l96_theta_rhs(x: np.ndarray, theta, forcing: float = 8.0) -> np.ndarray:
    """Lorenz-96 tendency with advection coefficient(s) theta.

    ``theta`` may be a scalar, one value per member, one value per site, or
    one value per contiguous block of sites (the four-parameter layout of
    the stochastic system).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.ascontiguousarray(np.atleast_2d(x))
    if x2.shape[1] < 4:
        raise ValueError("Lorenz-96 needs at least 4 sites (cyclic quadratics)")
    out = _kernels.l96_theta_rhs(x2, _site_theta(theta, x2.shape), forcing)
    return out[0] if single else out


def lorenz63_rhs(a: np.ndarray) -> np.ndarray:
    """Classic Lorenz-63 tendency (sigma=10, rho=28, beta=8/3)."""
    a = np.asarray(a, dtype=float)
    da = np.empty_like(a)
    da[..., 0] = L63_SIGMA * (a[..., 1] - a[..., 0])
    da[..., 1] = L63_RHO * a[..., 0] - a[..., 1] - a[..., 0] * a[..., 2]
    da[..., 2] = a[..., 0] * a[..., 1] - L63_BETA * a[..., 2]
    return da


def l96l63_rhs(z: np.ndarray, eps: float) -> np.ndarray:
    """Tendency of the extended L96-L63 state (x_1..x_n, a_1, a_2, a_3).

    The first quadratic term of every site carries theta = a_1/40 + 1; the
    Lorenz-63 block runs at time scale 1/eps.
    """
    if eps <= 0:
        raise ValueError("time-scale parameter eps must be positive")
    z = np.asarray(z, dtype=float)
    x, a = z[..., :-3], z[..., -3:]
    theta = a[..., 0] / 40.0 + 1.0
    dx = l96_theta_rhs(x, theta, 8.0)
    return np.concatenate([dx, lorenz63_rhs(a) / eps], axis=-1)


def theta_from_gamma(gamma) -> np.ndarray:
    """Blockwise parameters theta_j = 1 + (3/10) sin(gamma + pi j/4), j=1..4."""
    return _kernels.theta_from_gamma(gamma)


def gamma_drift(gamma, eps: float):
    """Drift of the latent angle of the stochastic system."""
    if eps <= 0:
        raise ValueError("time-scale parameter eps must be positive")
    return -(2.0 - np.sin(2.0 * np.asarray(gamma, dtype=float)) / 2.0) / eps


def l96_stochastic_step(z: np.ndarray, eps: float, h: float, xi) -> np.ndarray:
    """One internal step of the L96-stochastic system (x_1..x_40, gamma).

    x advances by one RK4 step with theta(gamma) frozen (forcing 6), then
    gamma by one Euler-Maruyama step driven by the standard-normal draw
    ``xi``.
    """
    if eps <= 0 or h <= 0:
        raise ValueError("eps and h must be positive")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    noise = np.broadcast_to(np.asarray(xi, dtype=float).reshape(-1, 1), (z2.shape[0], 1))
    out = _kernels.step_l96_stochastic(z2, eps, 6.0, h, 1, np.ascontiguousarray(noise))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# ensemble propagators (hot paths, kernel-backed)


def propagate_l96_theta(x, theta, cfg: IntegratorConfig, forcing: float = 8.0):
    """Advance an x ensemble one observation interval with frozen theta."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.ascontiguousarray(np.atleast_2d(x))
    out = _kernels.rk4_l96_theta(x2, _site_theta(theta, x2.shape), forcing, cfg.h, cfg.substeps)
    return out[0] if single else out


def propagate_l96l63(z, eps: float, cfg: IntegratorConfig):
    """Advance an extended L96-L63 ensemble one observation interval."""
    if eps <= 0:
        raise ValueError("time-scale parameter eps must be positive")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.ascontiguousarray(np.atleast_2d(z))
    out = _kernels.rk4_l96l63(z2, eps, 8.0, cfg.h, cfg.substeps)
    return out[0] if single else out


def propagate_l96_stochastic(z, eps: float, cfg: IntegratorConfig, rng: np.random.Generator):
    """Advance an (x, gamma) ensemble one observation interval."""
    if eps <= 0:
        raise ValueError("time-scale parameter eps must be positive")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.ascontiguousarray(np.atleast_2d(z))
    noise = rng.standard_normal((z2.shape[0], cfg.substeps))
    out = _kernels.step_l96_stochastic(z2, eps, 6.0, cfg.h, cfg.substeps, noise)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# generic integration driver


def _check_finite(z, step):
    if not np.all(np.isfinite(z)) or np.any(np.abs(z) > DIVERGENCE_LIMIT):
        raise DivergenceError(f"state diverged at observation step {step}", step=step)


def _rk4_step(rhs, z, h):
    k1 = rhs(z)
    k2 = rhs(z + (0.5 * h) * k1)
    k3 = rhs(z + (0.5 * h) * k2)
    k4 = rhs(z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    model: Union[Callable[[np.ndarray], np.ndarray], SdeSpec],
    z0: np.ndarray,
    cfg: IntegratorConfig,
    n_steps: int,
    rng: Optional[np.random.Generator] = None,
) -> TimeSeries:
    """Integrate a model for ``n_steps`` observation intervals of length tau.

    ``model`` is either a deterministic tendency ``rhs(z) -> dz`` (advanced
    with RK4) or an :class:`SdeSpec` (advanced with Euler-Maruyama). The
    returned series holds n_steps + 1 states including ``z0``. A state
    exceeding ``DIVERGENCE_LIMIT`` raises :class:`DivergenceError` carrying
    the step index.
    """
    z = np.asarray(z0, dtype=float).copy()
    stochastic = isinstance(model, SdeSpec)
    if stochastic:
        if z.shape[-1] != model.dim:
            raise ValueError("initial state dimension does not match the SDE spec")
        if rng is None:
            raise ValueError("stochastic integration needs an explicit rng")
    out = np.empty((n_steps + 1,) + z.shape)
    out[0] = z
    sqh = np.sqrt(cfg.h)
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n_steps + 1):
            for _ in range(cfg.substeps):
                if stochastic:
                    z = z + cfg.h * model.drift(z) + sqh * model.diffusion * rng.standard_normal(z.shape)
                else:
                    z = _rk4_step(model, z, cfg.h)
            _check_finite(z, step)
            out[step] = z
    return TimeSeries(values=out, dt=cfg.tau)


def simulate_l96l63(z0, eps: float, n_steps: int, cfg: Optional[IntegratorConfig] = None) -> TimeSeries:
    """Fast kernel-backed L96-L63 trajectory (43-dimensional extended state)."""
    cfg = cfg or IntegratorConfig()
    z = np.asarray(z0, dtype=float)
    out = np.empty((n_steps + 1, z.shape[-1]))
    out[0] = z
    for step in range(1, n_steps + 1):
        z = propagate_l96l63(z, eps, cfg)
        _check_finite(z, step)
        out[step] = z
    return TimeSeries(values=out, dt=cfg.tau)


def simulate_l96_stochastic(
    z0, eps: float, n_steps: int, rng: np.random.Generator,
    cfg: Optional[IntegratorConfig] = None,
) -> TimeSeries:
    """Fast kernel-backed L96-stochastic trajectory (41-dimensional state)."""
    cfg = cfg or IntegratorConfig()
    z = np.asarray(z0, dtype=float)
    out = np.empty((n_steps + 1, z.shape[-1]))
    out[0] = z
    for step in range(1, n_steps + 1):
        z = propagate_l96_stochastic(z, eps, cfg, rng)
        _check_finite(z, step)
        out[step] = z
    return TimeSeries(values=out, dt=cfg.tau)


def ornstein_uhlenbeck_spec(alpha: float, sigma: float, mean: float = 0.0, dim: int = 1) -> SdeSpec:
    """OU process d theta = alpha (mean - theta) dt + sigma dW per component."""
    mu = np.full(dim, mean)
    return SdeSpec(drift=lambda th: alpha * (mu - th), diffusion=np.full(dim, sigma), dim=dim)


def sample_ou_exact(
    n: int, alpha: float, sigma: float, mean: float, tau: float,
    rng: np.random.Generator, theta0: Optional[float] = None,
) -> TimeSeries:
    """Exact-discretization OU path, started from equilibrium by default."""
    sd_eq = sigma / np.sqrt(2.0 * alpha)
    a = np.exp(-alpha * tau)
    s = sigma * np.sqrt((1.0 - a * a) / (2.0 * alpha))
    th = np.empty(n)
    th[0] = mean + sd_eq * rng.standard_normal() if theta0 is None else theta0
    eta = rng.standard_normal(n)
    for i in range(1, n):
        th[i] = mean + a * (th[i - 1] - mean) + s * eta[i]
    return TimeSeries(values=th[:, None], dt=tau)


# ---------------------------------------------------------------------------
# mean stochastic model


@dataclass
class MsmModel:
    """Componentwise OU fit matching mean, variance and correlation time."""

    mean: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    corr_time: np.ndarray
    tau: float

    @property
    def variance(self) -> np.ndarray:
        return self.sigma**2 / (2.0 * self.alpha)

    def forecast_mean(self, theta0, lead_steps: int) -> np.ndarray:
        decay = np.exp(-self.alpha * lead_steps * self.tau)
        return self.mean + decay * (np.asarray(theta0, dtype=float) - self.mean)

    def forecast_var(self, s0, lead_steps: int) -> np.ndarray:
        decay2 = np.exp(-2.0 * self.alpha * lead_steps * self.tau)
        return self.variance * (1.0 - decay2) + decay2 * np.asarray(s0, dtype=float)

    def step_ensemble(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Exact one-step OU transition applied to each member."""
        a = np.exp(-self.alpha * self.tau)
        s = np.sqrt(self.variance * (1.0 - a * a))
        return self.mean + a * (theta - self.mean) + s * rng.standard_normal(theta.shape)


def _integrated_corr_time(x: np.ndarray, dt: float) -> float:
    """Trapezoid integral of the empirical ACF up to its first non-positive lag."""
    x = x - x.mean()
    denom = float(x @ x)
    total = 0.5  # rho_0 / 2
    prev = 1.0
    for lag in range(1, len(x) // 2):
        rho = float(x[:-lag] @ x[lag:]) / denom
        if rho <= 0.0:
            total += 0.5 * prev  # close the trapezoid at the zero crossing
            break
        total += 0.5 * (prev + rho)
        prev = rho
    return total * dt


def msm_fit(series: TimeSeries) -> MsmModel:
    """Fit the mean stochastic model to a parameter series.

    alpha = 1/T with T the integrated correlation time (clipped to
    [1e-6, 1e3]), sigma = sqrt(2 alpha var), mean the sample mean.
    """
    vals = series.values
    if len(series) < 100:
        raise InsufficientDataError("MSM fit needs at least 100 samples")
    var = vals.var(axis=0, ddof=1)
    if np.any(var <= 0):
        raise DegenerateDataError("MSM fit needs a series with nonzero variance")
    m = vals.shape[1]
    corr_time = np.array([_integrated_corr_time(vals[:, j], series.dt) for j in range(m)])
    alpha = np.clip(1.0 / corr_time, 1.0e-6, 1.0e3)
    sigma = np.sqrt(2.0 * alpha * var)
    return MsmModel(mean=vals.mean(axis=0), alpha=alpha, sigma=sigma,
                    corr_time=corr_time, tau=series.dt)
