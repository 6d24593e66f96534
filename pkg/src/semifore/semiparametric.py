"""Semiparametric forecasting and filtering.

The forecast couples an ensemble integration of the parametric model with
the diffusion forecast of the parameter density: each step draws fresh
parameter samples from the current density by rejection, integrates every
member one observation interval with its parameter frozen, and advances
the density coefficients with the shift operator. The parameter density
never receives feedback from the state, so the coefficient trajectory is
exactly the one produced by iterating the shift operator alone.

The filter alternates that forecast step with two assimilation stages:
a joint ensemble Kalman update of (x, theta) whose prior mixes ensemble
statistics for x with density statistics for theta, and a Bayesian update
of the density itself using the Kalman theta analysis as a Gaussian
likelihood evaluated on the training points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .dforecast import (
    SampledDensity,
    ShiftOperator,
    density_moments,
    project_density,
    reconstruct_density,
    rejection_sample,
)
from .enkf import (
    JITTER,
    enkf_analysis,
    patch_divergent,
    psd_clip,
    sigma_ensemble,
    symmetrize,
)
from .errors import DensityCollapseError
from .geometry import DiffusionBasis
from .models import TimeSeries

DIVERGENCE_SD = 10.0
DIVERGENCE_RUN = 20


def noninformative_coeffs(basis: DiffusionBasis) -> np.ndarray:
    """Coefficients of the equilibrium density (the non-informative prior)."""
    return project_density(SampledDensity.equilibrium(basis), basis)


@dataclass
class ForecastResult:
    """Per-lead ensemble means and parameter density moments."""

    x_mean: np.ndarray                      # (H+1, n)
    x_spread: np.ndarray                    # (H+1,) RMS ensemble spread
    theta_mean: Optional[np.ndarray]        # (H+1, m); None for methods without it
    theta_var: Optional[np.ndarray]         # (H+1, m) marginal variances
    events: dict
    method: str = ""
    coeff_history: Optional[np.ndarray] = None  # (H+1, M) for the semiparametric path

    @property
    def horizon(self) -> int:
        return self.x_mean.shape[0] - 1


def semiparametric_forecast(
    x_ens: np.ndarray,
    initial_density: Union[SampledDensity, np.ndarray],
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    basis: DiffusionBasis,
    shift_op: ShiftOperator,
    horizon: int,
    rng: np.random.Generator,
    source_dim: Optional[int] = None,
) -> ForecastResult:
    """Run the combined ensemble / diffusion forecast for ``horizon`` steps.

    ``initial_density`` is a normalized density on the training points or a
    coefficient vector. Parameters fed to the model are the leading
    ``source_dim`` coordinates of the sampled (possibly delay-embedded)
    training points, held constant over each observation interval.
    Divergent members are replaced by the ensemble mean and counted; a
    collapsed density resets to the non-informative prior and is counted.
    """
    x_ens = np.array(x_ens, dtype=float)
    K, n = x_ens.shape
    m = source_dim or basis.points.shape[1]
    events: dict = {}
    if isinstance(initial_density, SampledDensity):
        p_cur = initial_density
        c = project_density(p_cur, basis)
    else:
        c = np.asarray(initial_density, dtype=float).copy()
        p_cur = reconstruct_density(c, basis)

    x_mean = np.empty((horizon + 1, n))
    x_spread = np.empty(horizon + 1)
    theta_mean = np.empty((horizon + 1, m))
    theta_var = np.empty((horizon + 1, m))
    coeffs = np.empty((horizon + 1, c.shape[0]))

    def record(lead, ens, density, coeff):
        x_mean[lead] = ens.mean(axis=0)
        x_spread[lead] = np.sqrt(np.mean((ens - x_mean[lead]) ** 2))
        mom_mean, mom_cov = density_moments(density, basis)
        theta_mean[lead] = mom_mean[:m]
        theta_var[lead] = np.diag(mom_cov)[:m]
        coeffs[lead] = coeff

    record(0, x_ens, p_cur, c)
    alive = True
    for lead in range(1, horizon + 1):
        if alive:
            sample = rejection_sample(p_cur, basis, K, rng)
            theta_k = sample.points[:, :m]
            with np.errstate(over="ignore", invalid="ignore"):
                x_ens = propagate_x(x_ens, theta_k)
            x_ens, alive = patch_divergent(x_ens, events)
            if not alive:
                events["diverged_at_lead"] = lead
        c = shift_op.matrix @ c
        try:
            p_cur = reconstruct_density(c, basis)
        except DensityCollapseError:
            events["density_collapses"] = events.get("density_collapses", 0) + 1
            c = noninformative_coeffs(basis)
            p_cur = SampledDensity.equilibrium(basis)
        record(lead, x_ens, p_cur, c)
    return ForecastResult(
        x_mean=x_mean, x_spread=x_spread, theta_mean=theta_mean,
        theta_var=theta_var, events=events, method="semiparametric",
        coeff_history=coeffs,
    )


# ---------------------------------------------------------------------------
# filtering


@dataclass
class SemiState:
    """Filter state: joint Gaussian belief plus density coefficients."""

    mean: np.ndarray          # (n+m,) analysis mean (x, theta)
    cov: np.ndarray           # (n+m, n+m) analysis covariance
    coeffs: np.ndarray        # (M,) analysis density coefficients
    n_x: int
    step: int = 0
    events: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return self.mean[: self.n_x]

    @property
    def theta(self) -> np.ndarray:
        return self.mean[self.n_x:]


def initial_semistate(
    x0: np.ndarray,
    theta0: np.ndarray,
    basis: DiffusionBasis,
    q_theta: np.ndarray,
    x_cov: Optional[np.ndarray] = None,
) -> SemiState:
    """State at time zero: C_xx = I, C_thth = Q_thth, non-informative density."""
    x0 = np.asarray(x0, dtype=float)
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    n, m = x0.shape[0], theta0.shape[0]
    cov = np.zeros((n + m, n + m))
    cov[:n, :n] = np.eye(n) if x_cov is None else x_cov
    cov[n:, n:] = np.atleast_2d(q_theta)
    return SemiState(
        mean=np.concatenate([x0, theta0]), cov=cov,
        coeffs=noninformative_coeffs(basis), n_x=n,
    )


def _count(events, key, inc=1):
    events[key] = events.get(key, 0) + inc


def bayes_update_coeffs(
    p_forecast: SampledDensity,
    theta_analysis: np.ndarray,
    cov_theta: np.ndarray,
    basis: DiffusionBasis,
    source_dim: int,
):
    """Multiply the forecast density by the Gaussian analysis likelihood.

    The likelihood exp(-0.5 |theta - theta_a|^2_{C}) is evaluated on the
    leading ``source_dim`` coordinates of the training points; the product
    is renormalized and projected back to coefficients. Returns
    ``(coefficients, collapsed)`` where ``collapsed`` marks a reset to the
    non-informative prior.
    """
    m = source_dim
    c_lik = symmetrize(np.atleast_2d(cov_theta)) + 1e-10 * np.eye(m)
    diff = basis.points[:, :m] - np.atleast_1d(theta_analysis)
    try:
        sol = np.linalg.solve(c_lik, diff.T)
    except np.linalg.LinAlgError:
        sol = np.linalg.pinv(c_lik) @ diff.T
    loglik = -0.5 * np.einsum("ij,ji->i", diff, sol)
    # no max-shift: an analysis far off the training support must underflow
    # to zero mass and trigger the non-informative reset
    with np.errstate(under="ignore"):
        vals = p_forecast.values * np.exp(loglik)
    try:
        p_a = SampledDensity.from_values(vals, basis)
        return project_density(p_a, basis), False
    except DensityCollapseError:
        return noninformative_coeffs(basis), True


def semiparametric_filter_step(
    state: SemiState,
    y_obs: np.ndarray,
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    obs_operator: Callable[[np.ndarray], np.ndarray],
    R: np.ndarray,
    basis: DiffusionBasis,
    shift_op: ShiftOperator,
    source_dim: Optional[int] = None,
) -> SemiState:
    """One forecast-assimilate cycle of the semiparametric filter.

    Forecast: sigma ensemble of the previous analysis, x integrated with
    each member's theta frozen, density coefficients advanced by the shift
    operator; the mixed prior takes x statistics from the ensemble, theta
    statistics from the density, and the cross covariance from the
    propagated x members against the previous theta analysis members.
    Assimilation: joint Kalman update on the resampled sigma ensemble,
    then a Bayesian update of the density with the Gaussian theta-analysis
    likelihood, projected back to coefficients.
    """
    n = state.n_x
    m = source_dim or state.mean.shape[0] - n
    events = dict(state.events)
    eye = np.eye(state.mean.shape[0])

    # (1) previous-analysis sigma ensemble; x propagates with theta frozen
    ens_a = sigma_ensemble(state.mean, state.cov + JITTER * eye)
    x_a, th_a = ens_a[:, :n], ens_a[:, n:]
    with np.errstate(over="ignore", invalid="ignore"):
        x_f = propagate_x(x_a, th_a)
    x_f, alive = patch_divergent(x_f, events)

    # (2) nonparametric forecast of the parameter density
    c_f = shift_op.matrix @ state.coeffs
    try:
        p_f = reconstruct_density(c_f, basis)
    except DensityCollapseError:
        _count(events, "density_collapses")
        c_f = noninformative_coeffs(basis)
        p_f = SampledDensity.equilibrium(basis)

    # (3) mixed prior statistics
    K = x_f.shape[0]
    x_f_mean = x_f.mean(axis=0)
    ax = x_f - x_f_mean
    c_xx = ax.T @ ax / K
    ath = th_a - th_a.mean(axis=0)
    c_xth = ax.T @ ath / K
    d_mean, d_cov = density_moments(p_f, basis)
    th_f_mean = d_mean[:m]
    c_thth = np.atleast_2d(d_cov)[:m, :m]
    z_f = np.concatenate([x_f_mean, th_f_mean])
    cov_f = np.block([[c_xx, c_xth], [c_xth.T, c_thth]])
    cov_f, deficiency = psd_clip(cov_f)
    if deficiency > 1e-8:
        _count(events, "psd_repairs")

    # (4) resample the joint ensemble from the mixed prior
    ens_rf = sigma_ensemble(z_f, cov_f + JITTER * eye)
    y_ens = obs_operator(ens_rf)

    # (5) Kalman analysis
    mean_a, cov_a = enkf_analysis(ens_rf, y_ens, y_obs, R)
    cov_a, deficiency = psd_clip(cov_a)
    if deficiency > 1e-8:
        _count(events, "psd_repairs")

    # (6) Bayesian update of the density with the Gaussian analysis likelihood
    c_a, collapsed = bayes_update_coeffs(p_f, mean_a[n:], cov_a[n:, n:], basis, m)
    if collapsed:
        _count(events, "density_collapses")

    return SemiState(mean=mean_a, cov=cov_a, coeffs=c_a, n_x=n,
                     step=state.step + 1, events=events)


@dataclass
class FilterRunResult:
    analysis: TimeSeries           # (T, n+m) analysis means
    states: list                   # SemiState after each assimilation
    events: dict
    diverged_at: Optional[int] = None

    @property
    def final(self) -> SemiState:
        return self.states[-1]


def run_filter(
    observations: np.ndarray,
    state0: SemiState,
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    obs_operator: Callable[[np.ndarray], np.ndarray],
    R: np.ndarray,
    basis: DiffusionBasis,
    shift_op: ShiftOperator,
    tau: float,
    source_dim: Optional[int] = None,
    t0: float = 0.0,
    keep_states: bool = True,
) -> FilterRunResult:
    """Iterate the semiparametric filter over a block of observations.

    On unrecoverable divergence (innovation RMS beyond 10 climatological
    SDs for 20 consecutive steps) the run stops and the partial results are
    returned with ``diverged_at`` set.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    if obs.shape[0] == 0:
        return FilterRunResult(
            analysis=TimeSeries(np.empty((1, state0.mean.shape[0])), dt=tau, t0=t0),
            states=[state0], events=dict(state0.events),
        )
    clim_sd = np.maximum(obs.std(axis=0), 1e-12)
    state = state0
    means = []
    states = [state0] if keep_states else [state0]
    bad_run = 0
    diverged_at = None
    for t in range(obs.shape[0]):
        state = semiparametric_filter_step(
            state, obs[t], propagate_x, obs_operator, R, basis, shift_op,
            source_dim=source_dim,
        )
        means.append(state.mean.copy())
        if keep_states:
            states.append(state)
        else:
            states[-1] = state
        innov = obs[t] - obs_operator(state.mean[None, :])[0]
        if np.sqrt(np.mean((innov / clim_sd) ** 2)) > DIVERGENCE_SD:
            bad_run += 1
            if bad_run >= DIVERGENCE_RUN:
                diverged_at = t
                break
        else:
            bad_run = 0
    return FilterRunResult(
        analysis=TimeSeries(np.asarray(means), dt=tau, t0=t0 + tau),
        states=states, events=dict(state.events), diverged_at=diverged_at,
    )
