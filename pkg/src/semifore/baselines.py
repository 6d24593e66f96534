"""Baseline parameter-forecast strategies: persistence, HMM draws, MSM, perfect.

All baselines consume the same initial x ensemble as the semiparametric
forecaster and integrate the parametric model one observation interval at
a time, differing only in where the per-step parameter values come from.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .models import MsmModel
from .semiparametric import ForecastResult, patch_divergent


def _drive(
    x_ens: np.ndarray,
    theta_for_lead: Callable[[int], np.ndarray],
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    horizon: int,
    method: str,
    theta_track: Optional[Callable[[int], tuple]] = None,
) -> ForecastResult:
    x_ens = np.array(x_ens, dtype=float)
    n = x_ens.shape[1]
    events: dict = {}
    x_mean = np.empty((horizon + 1, n))
    x_spread = np.empty(horizon + 1)
    x_mean[0] = x_ens.mean(axis=0)
    x_spread[0] = np.sqrt(np.mean((x_ens - x_mean[0]) ** 2))
    track = [theta_track(0)] if theta_track else None
    alive = True
    for lead in range(1, horizon + 1):
        if alive:
            with np.errstate(over="ignore", invalid="ignore"):
                x_ens = propagate_x(x_ens, theta_for_lead(lead - 1))
            x_ens, alive = patch_divergent(x_ens, events)
            if not alive:
                events["diverged_at_lead"] = lead
        x_mean[lead] = x_ens.mean(axis=0)
        x_spread[lead] = np.sqrt(np.mean((x_ens - x_mean[lead]) ** 2))
        if track is not None:
            track.append(theta_track(lead))
    theta_mean = theta_var = None
    if track is not None:
        theta_mean = np.asarray([t[0] for t in track])
        theta_var = np.asarray([t[1] for t in track])
    return ForecastResult(x_mean=x_mean, x_spread=x_spread, theta_mean=theta_mean,
                          theta_var=theta_var, events=events, method=method)


def persistence_forecast(
    x_ens: np.ndarray,
    theta0,
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    horizon: int,
) -> ForecastResult:
    """Hold the parameters at their initial value for every step."""
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    K = np.asarray(x_ens).shape[0]
    frozen = np.repeat(theta0[None, :], K, axis=0)
    return _drive(
        x_ens, lambda lead: frozen, propagate_x, horizon, "persistence",
        theta_track=lambda lead: (theta0.copy(), np.zeros_like(theta0)),
    )


def hmm_forecast(
    x_ens: np.ndarray,
    training_thetas: np.ndarray,
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    horizon: int,
    rng: np.random.Generator,
) -> ForecastResult:
    """Draw fresh equilibrium parameter samples from the training data each step."""
    thetas = np.atleast_2d(np.asarray(training_thetas, dtype=float))
    if thetas.shape[0] == 1:
        thetas = thetas.T
    K = np.asarray(x_ens).shape[0]
    clim_mean = thetas.mean(axis=0)
    clim_var = thetas.var(axis=0)

    def pick(lead):
        return thetas[rng.integers(0, thetas.shape[0], size=K)]

    return _drive(
        x_ens, pick, propagate_x, horizon, "hmm",
        theta_track=lambda lead: (clim_mean, clim_var) if lead else (clim_mean, clim_var),
    )


def msm_forecast(
    x_ens: np.ndarray,
    theta0,
    s0,
    msm: MsmModel,
    propagate_x: Callable[[np.ndarray, np.ndarray], np.ndarray],
    horizon: int,
    sample_ensemble: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ForecastResult:
    """Advance the parameter belief with the fitted OU closed forms.

    By default the ensemble integrates with the forecast mean as the fixed
    parameter at each step; ``sample_ensemble`` instead draws a Gaussian
    parameter sample per member (kept behind a flag: unstable for the
    energy-sensitive advection systems).
    """
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    K = np.asarray(x_ens).shape[0]
    if sample_ensemble and rng is None:
        raise ValueError("ensemble sampling variant needs an rng")

    def theta_for_lead(lead):
        mean = msm.forecast_mean(theta0, lead)
        if not sample_ensemble:
            return np.repeat(mean[None, :], K, axis=0)
        sd = np.sqrt(msm.forecast_var(s0, lead))
        return mean + sd * rng.standard_normal((K, mean.shape[0]))

    return _drive(
        x_ens, theta_for_lead, propagate_x, horizon, "msm",
        theta_track=lambda lead: (msm.forecast_mean(theta0, lead),
                                  msm.forecast_var(s0, lead)),
    )


def perfect_forecast(
    z_ens: np.ndarray,
    propagate_full: Callable[[np.ndarray], np.ndarray],
    horizon: int,
    n_x: int,
) -> ForecastResult:
    """Ensemble forecast with the full (hidden-state) model.

    ``z_ens`` holds extended states; the reported forecast is the x block.
    """
    z_ens = np.array(z_ens, dtype=float)
    events: dict = {}
    x_mean = np.empty((horizon + 1, n_x))
    x_spread = np.empty(horizon + 1)

    def record(lead):
        x = z_ens[:, :n_x]
        x_mean[lead] = x.mean(axis=0)
        x_spread[lead] = np.sqrt(np.mean((x - x_mean[lead]) ** 2))

    record(0)
    alive = True
    for lead in range(1, horizon + 1):
        if alive:
            with np.errstate(over="ignore", invalid="ignore"):
                z_ens = propagate_full(z_ens)
            z_ens, alive = patch_divergent(z_ens, events)
            if not alive:
                events["diverged_at_lead"] = lead
        record(lead)
    return ForecastResult(x_mean=x_mean, x_spread=x_spread, theta_mean=None,
                          theta_var=None, events=events, method="perfect")
