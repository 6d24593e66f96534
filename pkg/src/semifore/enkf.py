"""Unscented square-root ensemble Kalman filtering and adaptive noise estimation.

The ensemble is the 2d sigma points mean +- sqrt(d) * (columns of the
symmetric PSD square root of C), which reproduce the mean exactly and the
covariance under the 1/(2d) convention; that same 1/K normalization is
used for every covariance assembled from sigma members (they are
deterministic quadrature nodes, not i.i.d. samples, and the 1/(K-1)
variant feeds back as unbounded inflation through the resampling cycle).
The analysis gain is C_zy (C_yy + R)^{-1} with C_yy the sample covariance
of the predicted observations.

Adaptive estimation of the process noise Q parameterizes the cross block
Q_theta_x, fits it to lag-0/lag-1 innovation statistics accumulated over a
sliding window, and projects the assembled matrix onto the nearest
symmetric PSD matrix via Q_hat = U |Lambda| U^T; the theta-theta block of
Q_hat is the variance estimate for the unmodeled parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CovarianceError, DivergenceError, EstimationError, NumericError
from .models import TimeSeries

JITTER = 1e-10
DIVERGENCE_SD = 10.0
DIVERGENCE_RUN = 20


def symmetrize(C: np.ndarray) -> np.ndarray:
    return (C + C.T) * 0.5


def healthy_members(members: np.ndarray) -> np.ndarray:
    """Mask of members that are finite and inside the divergence limit."""
    from .models import DIVERGENCE_LIMIT

    with np.errstate(invalid="ignore"):
        return np.all(np.isfinite(members), axis=1) & (
            np.max(np.abs(members), axis=1) <= DIVERGENCE_LIMIT
        )


def patch_divergent(members: np.ndarray, events: dict):
    """Replace diverged members by the healthy ensemble mean.

    Returns the patched ensemble and False when no healthy member is left.
    """
    ok = healthy_members(members)
    if np.all(ok):
        return members, True
    events["diverged_members"] = events.get("diverged_members", 0) + int((~ok).sum())
    if not np.any(ok):
        return members, False
    members = members.copy()
    members[~ok] = members[ok].mean(axis=0)
    return members, True


def psd_clip(C: np.ndarray):
    """Project onto the PSD cone by clipping negative eigenvalues.

    Returns the repaired matrix and the relative deficiency (most negative
    eigenvalue over the largest, 0 when already PSD).
    """
    vals, vecs = np.linalg.eigh(symmetrize(C))
    top = max(vals.max(), 0.0)
    deficiency = max(-vals.min(), 0.0) / top if top > 0 else 0.0
    clipped = np.clip(vals, 0.0, None)
    return (vecs * clipped) @ vecs.T, deficiency


def sigma_ensemble(mean: np.ndarray, cov: np.ndarray, return_sqrt: bool = False):
    """2d deterministic members mean +- sqrt(d) * columns of C^(1/2).

    The symmetric square root comes from the eigendecomposition; round-off
    negatives below -1e-10 (relative) raise :class:`CovarianceError`.
    """
    mean = np.asarray(mean, dtype=float)
    d = mean.shape[0]
    vals, vecs = np.linalg.eigh(symmetrize(np.asarray(cov, dtype=float)))
    top = max(vals.max(), 0.0)
    if vals.min() < -1e-10 * max(top, 1.0):
        raise CovarianceError(
            f"covariance not PSD beyond round-off (min eigenvalue {vals.min():.3e})"
        )
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))  # columns scaled
    sq = root @ vecs.T  # symmetric square root
    spread = np.sqrt(d) * sq
    members = np.concatenate([mean + spread.T, mean - spread.T], axis=0)
    if return_sqrt:
        return members, vecs, np.sqrt(np.clip(vals, 0.0, None))
    return members


def ensemble_moments(members: np.ndarray, ddof: int = 0):
    """Mean and covariance of an ensemble (rows are members).

    The default 1/K normalization is the sigma-point convention: the 2d
    deterministic members reproduce the generating covariance exactly.
    """
    mean = members.mean(axis=0)
    anom = members - mean
    cov = anom.T @ anom / (members.shape[0] - ddof)
    return mean, cov


def _analysis(z_ens, y_ens, y_obs, R):
    K = z_ens.shape[0]
    z_mean = z_ens.mean(axis=0)
    y_mean = y_ens.mean(axis=0)
    az = z_ens - z_mean
    ay = y_ens - y_mean
    c_zz = az.T @ az / K
    c_zy = az.T @ ay / K
    c_yy = ay.T @ ay / K + np.asarray(R, dtype=float)
    try:
        gain = np.linalg.solve(c_yy, c_zy.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular innovation covariance: {exc}") from exc
    mean_a = z_mean + gain @ (np.asarray(y_obs, dtype=float) - y_mean)
    cov_a = symmetrize(c_zz - gain @ c_zy.T)
    return mean_a, cov_a, gain, y_mean


def enkf_analysis(z_ens: np.ndarray, y_ens: np.ndarray, y_obs, R):
    """Kalman update from aligned state and observation ensembles.

    Returns the analysis mean and the symmetrized analysis covariance
    C^a = C^f - K (C_yy + R) K^T with K = C_zy (C_yy + R)^{-1}.
    """
    if z_ens.shape[0] != y_ens.shape[0]:
        raise ValueError("state and observation ensembles are not aligned")
    mean_a, cov_a, _, _ = _analysis(z_ens, y_ens, y_obs, R)
    return mean_a, cov_a


def linear_obs(H: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Observation operator members -> members @ H^T for a matrix H."""
    H = np.asarray(H, dtype=float)
    return lambda members: members @ H.T


@dataclass
class FilterResult:
    means: np.ndarray                 # (T, d) analysis means
    covs: Optional[np.ndarray]        # (T, d, d) analysis covariances
    innovations: np.ndarray           # (T, q)
    repairs: int = 0                  # PSD clips beyond round-off
    diverged_at: Optional[int] = None
    events: dict = field(default_factory=dict)

    def series(self, dt: float, t0: float = 0.0) -> TimeSeries:
        return TimeSeries(values=self.means, dt=dt, t0=t0)


def unscented_enkf(
    observations: np.ndarray,
    propagate: Callable[[np.ndarray], np.ndarray],
    obs_operator: Callable[[np.ndarray], np.ndarray],
    R: np.ndarray,
    init_mean: np.ndarray,
    init_cov: np.ndarray,
    q_step: Optional[np.ndarray] = None,
    store_covs: bool = True,
    clim_sd: Optional[np.ndarray] = None,
    inflation: float = 1.0,
) -> FilterResult:
    """Run the unscented EnKF over a block of observations.

    ``propagate`` maps the (2d, d) analysis sigma ensemble over one
    observation interval; ``q_step`` is the per-step process noise added to
    the forecast covariance before resampling. Divergence (innovation RMS
    above 10 climatological SDs for 20 consecutive steps) raises
    :class:`DivergenceError`.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    T, q = obs.shape
    d = init_mean.shape[0]
    mean = np.asarray(init_mean, dtype=float).copy()
    cov = symmetrize(np.asarray(init_cov, dtype=float)).copy()
    if clim_sd is None:
        clim_sd = obs.std(axis=0)
    clim_sd = np.maximum(np.asarray(clim_sd, dtype=float), 1e-12)
    means = np.empty((T, d))
    covs = np.empty((T, d, d)) if store_covs else None
    innovations = np.empty((T, q))
    repairs = 0
    bad_run = 0
    eye = np.eye(d)
    events: dict = {}
    for t in range(T):
        ens = sigma_ensemble(mean, cov + JITTER * eye)
        with np.errstate(over="ignore", invalid="ignore"):
            ens_f = propagate(ens)
        ens_f, alive = patch_divergent(ens_f, events)
        if not alive:
            raise DivergenceError(
                f"entire ensemble diverged during propagation at step {t}", step=t)
        mean_f, cov_f = ensemble_moments(ens_f, ddof=0)
        if q_step is not None:
            cov_f = cov_f + q_step
        if inflation != 1.0:
            cov_f = cov_f * inflation
        cov_f, deficiency = psd_clip(cov_f)
        if deficiency > 1e-10:
            repairs += 1
        ens_rf = sigma_ensemble(mean_f, cov_f + JITTER * eye)
        y_ens = obs_operator(ens_rf)
        mean, cov, _, y_mean = _analysis(ens_rf, y_ens, obs[t], R)
        cov, deficiency = psd_clip(cov)
        if deficiency > 1e-10:
            repairs += 1
        innovations[t] = obs[t] - y_mean
        means[t] = mean
        if store_covs:
            covs[t] = cov
        if np.sqrt(np.mean((innovations[t] / clim_sd) ** 2)) > DIVERGENCE_SD:
            bad_run += 1
            if bad_run >= DIVERGENCE_RUN:
                raise DivergenceError(
                    f"filter innovations exceeded {DIVERGENCE_SD} climatological SDs "
                    f"for {DIVERGENCE_RUN} consecutive steps", step=t)
        else:
            bad_run = 0
    return FilterResult(means=means, covs=covs, innovations=innovations,
                        repairs=repairs, events=events)


def augment_propagator(
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray], n_x: int
) -> Callable[[np.ndarray], np.ndarray]:
    """Augmented-state propagator: x advances with theta frozen per member."""

    def prop(members: np.ndarray) -> np.ndarray:
        x, theta = members[:, :n_x], members[:, n_x:]
        out = np.empty_like(members)
        out[:, :n_x] = propagate_x(x, theta)
        out[:, n_x:] = theta
        return out

    return prop


def extract_theta_series(
    observations: np.ndarray,
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    obs_operator: Callable[[np.ndarray], np.ndarray],
    R: np.ndarray,
    q_theta: np.ndarray,
    n_x: int,
    m_theta: int,
    tau: float,
    init_x: np.ndarray,
    init_theta: np.ndarray,
    init_cov: Optional[np.ndarray] = None,
):
    """Recover a time series of hidden parameters by state augmentation.

    The augmented filter state is (x, theta); between observations x
    integrates under the parametric model with each member's theta frozen
    while theta receives additive noise with covariance ``q_theta * tau``
    (the white-noise surrogate model for the unknown parameter dynamics).
    Returns (analysis TimeSeries of (x, theta), FilterResult).
    """
    q_theta = np.atleast_2d(np.asarray(q_theta, dtype=float))
    if q_theta.shape != (m_theta, m_theta):
        raise ValueError("q_theta must be m x m")
    vals, _ = np.linalg.eigh(symmetrize(q_theta))
    if vals.min() <= 0:
        raise CovarianceError("q_theta must be symmetric positive definite")
    d = n_x + m_theta
    if init_cov is None:
        init_cov = np.eye(d)
        init_cov[n_x:, n_x:] = q_theta
    q_step = np.zeros((d, d))
    q_step[n_x:, n_x:] = q_theta * tau
    init_mean = np.concatenate([np.asarray(init_x, float), np.atleast_1d(init_theta)])
    result = unscented_enkf(
        observations, augment_propagator(propagate_x, n_x), obs_operator, R,
        init_mean, init_cov, q_step=q_step,
    )
    return result.series(dt=tau), result


# ---------------------------------------------------------------------------
# adaptive estimation of Q (unmodeled-parameter covariance)


def spd_project(Q: np.ndarray) -> np.ndarray:
    """Nearest-SPD projection Q_hat = U Lambda U^T from the SVD Q = U Lambda V^T."""
    U, s, _ = np.linalg.svd(symmetrize(np.asarray(Q, dtype=float)))
    return (U * s) @ U.T


@dataclass
class CrossCovParameterization:
    """One parameter per entry of Q_theta_x (the paper's appendix layout).

    Parameter q_{i*n + j} sets (Q_theta_x)_{ij} and its transpose entry;
    the theta-theta block of the assembled matrix is identically zero and
    only appears after the SPD projection.
    """

    n_x: int
    m_theta: int

    @property
    def size(self) -> int:
        return self.n_x * self.m_theta

    def assemble(self, q: np.ndarray) -> np.ndarray:
        d = self.n_x + self.m_theta
        Q = np.zeros((d, d))
        block = np.asarray(q, dtype=float).reshape(self.m_theta, self.n_x)
        Q[self.n_x:, : self.n_x] = block
        Q[: self.n_x, self.n_x:] = block.T
        return Q

    def extract(self, cross_block: np.ndarray) -> np.ndarray:
        return np.asarray(cross_block, dtype=float).reshape(self.size)


@dataclass
class NoiseEstimate:
    """Fitted process-noise model (all covariances per observation step)."""

    Q: np.ndarray                 # assembled sum q_r Q_r (indefinite)
    Qhat: np.ndarray              # SPD projection, consumed by the filters
    q_params: np.ndarray
    theta_variance: np.ndarray    # theta-theta block of Qhat
    tau: float
    converged: bool
    sweeps: int
    history: list = field(default_factory=list)

    @property
    def qhat_rate(self) -> np.ndarray:
        """Per-unit-time convention of the white-noise model."""
        return self.Qhat / self.tau

    def save(self, path) -> None:
        np.savez_compressed(path, Q=self.Q, Qhat=self.Qhat, q_params=self.q_params,
                            theta_variance=self.theta_variance,
                            tau=np.float64(self.tau),
                            converged=np.bool_(self.converged),
                            sweeps=np.int64(self.sweeps))


def _sigma_sqrt_inv(vecs, sqrt_vals):
    inv = np.where(sqrt_vals > 1e-12, 1.0 / np.maximum(sqrt_vals, 1e-300), 0.0)
    return (vecs * inv) @ vecs.T


def _adaptive_sweep(obs, propagate, H, R, init_mean, init_cov, q_step, window,
                    burn, n_x, m_theta):
    """One filter pass producing the windowed per-step cross-noise estimate.

    For every pair of consecutive innovations the one-step relations

        E[eps_t eps_t^T]     = H P^f_t H^T + R
        E[eps_{t+1} eps_t^T] = H F_{t+1} (P^f_t H^T - K_t E[eps_t eps_t^T])

    are solved with that step's own flow linearization F (sigma central
    differences) and gain K for the theta-x block of the true forecast
    covariance; the part not explained by propagating the filter's analysis
    covariance is the per-step cross-noise sample. Products are formed per
    step before averaging - time-averaging F, K and the innovation moments
    separately loses their correlations, which is fatal for chaotic flows.
    """
    T = obs.shape[0]
    d = init_mean.shape[0]
    mean = init_mean.copy()
    cov = symmetrize(init_cov).copy()
    lam = 1.0 - 1.0 / window
    eye = np.eye(d)
    q_acc = np.zeros((m_theta, n_x))
    s_acc = np.zeros((m_theta, m_theta))
    c0_acc = np.zeros((n_x, n_x))
    wsum = 0.0
    prev = None       # (eps_t, gain_t, Pa_{t-1}, F_t) from the previous iteration
    sqd = np.sqrt(d)
    events: dict = {}
    for t in range(T):
        pa_in = cov.copy()  # analysis covariance entering this propagation
        ens, vecs, sq = sigma_ensemble(mean, cov + JITTER * eye, return_sqrt=True)
        with np.errstate(over="ignore", invalid="ignore"):
            ens_f = propagate(ens)
        ens_f, alive = patch_divergent(ens_f, events)
        if not alive:
            raise DivergenceError(
                f"adaptive sweep ensemble diverged at step {t}", step=t)
        # flow-map linearization from the sigma central differences
        delta = (ens_f[:d] - ens_f[d:]) * 0.5
        F = (delta.T @ _sigma_sqrt_inv(vecs, sq)) / sqd
        mean_f, cov_f = ensemble_moments(ens_f, ddof=0)
        cov_f, _ = psd_clip(cov_f + q_step)
        ens_rf = sigma_ensemble(mean_f, cov_f + JITTER * eye)
        y_ens = ens_rf @ H.T
        mean, cov, gain, y_mean = _analysis(ens_rf, y_ens, obs[t], R)
        cov, _ = psd_clip(cov)
        eps = obs[t] - y_mean
        if prev is not None and t > burn:
            eps_p, gain_p, pa_pp, f_p = prev
            c0_t = np.outer(eps_p, eps_p)
            # lag-1 relation with this step's F recovers P^f_{t-1} theta-x
            b = np.outer(eps, eps_p) + F[:n_x, :] @ gain_p @ c0_t
            resid = b - F[:n_x, :n_x] @ (c0_t - R)
            x_t, *_ = np.linalg.lstsq(F[:n_x, n_x:], resid, rcond=None)
            # cross noise: what propagating Pa with the matching F leaves over
            q_t = (x_t
                   - pa_pp[n_x:, :n_x] @ f_p[:n_x, :n_x].T
                   - pa_pp[n_x:, n_x:] @ f_p[:n_x, n_x:].T)
            # theta-theta noise from the exact identity-propagation balance:
            # E[P^f_ثth] - E[P^a_thth] = Q_thth, with the update deficit
            # K_th P_xth + P_thx K_th^T - K_th C0 K_th^T observable per step
            k_th = gain_p[n_x:, :]
            s_t = (k_th @ x_t.T + x_t @ k_th.T - k_th @ c0_t @ k_th.T)
            q_acc = lam * q_acc + q_t
            s_acc = lam * s_acc + s_t
            c0_acc = lam * c0_acc + c0_t
            wsum = lam * wsum + 1.0
        prev = (eps, gain, pa_in, F)
    if wsum <= 0:
        raise EstimationError("observation record too short for the statistics window")
    return q_acc / wsum, s_acc / wsum, c0_acc / wsum


def adaptive_estimate_Q(
    observations: np.ndarray,
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    R: np.ndarray,
    n_x: int,
    m_theta: int,
    tau: float,
    init_x: np.ndarray,
    init_theta: np.ndarray,
    parameterization: Optional[CrossCovParameterization] = None,
    max_sweeps: int = 20,
    damping: float = 0.1,
    rel_tol: float = 0.05,
    window: int = 500,
    burn: int = 50,
    init_theta_noise: float = 0.01,
    init_theta_spread: float = 0.01,
) -> NoiseEstimate:
    """Estimate the process-noise covariance from innovation statistics.

    Runs repeated unscented-EnKF sweeps over the observations with the
    current Q_hat, accumulates lag-0/lag-1 innovation covariances over an
    exponentially weighted window, solves the steady-state relations

        C_0 = H P^f H^T + R,
        C_1 = H F [P^f H^T - K C_0]

    for the observable blocks of the true forecast covariance, attributes
    the unexplained part of P^f_theta_x to the cross noise, and iterates
    with damping until the parameters settle. Observations must be of the
    x block alone (H = [I 0]), the setting in which the parameters are
    hidden.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    if obs.shape[0] < 2000:
        raise EstimationError("adaptive estimation needs at least 2000 observations")
    param = parameterization or CrossCovParameterization(n_x=n_x, m_theta=m_theta)
    d = n_x + m_theta
    if obs.shape[1] != n_x:
        raise ValueError("adaptive estimation assumes full observation of the x block")
    H = np.zeros((n_x, d))
    H[:, :n_x] = np.eye(n_x)
    R = np.asarray(R, dtype=float)
    init_mean = np.concatenate([np.asarray(init_x, float), np.atleast_1d(init_theta)])
    # sigma spreads scale with sqrt(d); a unit initial theta variance would
    # throw members far outside the stable parameter range of the model
    init_cov = np.eye(d)
    init_cov[n_x:, n_x:] = init_theta_spread * np.eye(m_theta)
    propagate = augment_propagator(propagate_x, n_x)

    q = np.zeros(param.size)
    qhat = np.zeros((d, d))
    qhat[n_x:, n_x:] = init_theta_noise * np.eye(m_theta)
    history = []
    converged = False
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        q_cross, s_raw, c0 = _adaptive_sweep(
            obs, propagate, H, R, init_mean, init_cov, qhat, window, burn,
            n_x, m_theta)
        # scale from the theta-theta balance (PSD part), direction from the
        # polar factor of the cross estimate; the SPD projection then puts
        # exactly that scale back on the theta block: |Q_tx| = S
        s_vals, s_vecs = np.linalg.eigh(symmetrize(s_raw))
        S = (s_vecs * np.clip(s_vals, 1e-10, None)) @ s_vecs.T
        W, _, Vt = np.linalg.svd(q_cross, full_matrices=False)
        q_new = param.extract(S @ (W @ Vt))
        # trust region: a single sweep may not grow the estimate unboundedly
        cap = 4.0 * max(float(np.linalg.norm(q)), init_theta_noise)
        norm_new = float(np.linalg.norm(q_new))
        if norm_new > cap:
            q_new = q_new * (cap / norm_new)
        q = (1.0 - damping) * q + damping * q_new
        history.append(q.copy())
        Q = param.assemble(q)
        qhat = spd_project(Q)
        qhat[n_x:, n_x:] += 1e-8 * np.eye(m_theta)  # keep the filter nondegenerate
        if sweep > 0:
            prev = history[-2]
            denom = max(float(np.linalg.norm(prev)), 1e-300)
            if np.linalg.norm(q - prev) / denom < rel_tol:
                converged = True
                break
    if len(history) >= 2:
        denom = max(float(np.linalg.norm(history[-2])), 1e-300)
        final_change = float(np.linalg.norm(history[-1] - history[-2])) / denom
        if final_change > 1.0:
            raise EstimationError(
                f"parameter estimates still swinging by {final_change:.0%} "
                f"after {sweeps} sweeps")
    Q = param.assemble(q)
    qhat = spd_project(Q)
    return NoiseEstimate(
        Q=Q, Qhat=qhat, q_params=q, theta_variance=qhat[n_x:, n_x:].copy(),
        tau=tau, converged=converged, sweeps=sweeps, history=history,
    )
