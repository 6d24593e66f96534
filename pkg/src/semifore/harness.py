"""Twin-experiment driver: truth generation, training, skill evaluation, reports.

The protocol follows the same shape for every system: simulate a long
truth trajectory, observe the x block with additive Gaussian noise, train
the nonparametric parameter model (from the true parameter series in
perfect-training mode, or from the adaptive-filter recovery in the full
pipeline), then score every configured method against the truth - either
pure forecasts from perturbed states, or filters run over an evaluation
window with forecasts launched from their own analyses. Skill is the
spatial-RMS error of the ensemble-mean x forecast, averaged over initial
conditions, with divergent forecasts capped at the climatological error
and counted.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import baselines
from .dforecast import SampledDensity, build_shift_operator
from .embedding import delay_embed
from .enkf import (
    adaptive_estimate_Q,
    extract_theta_series,
    linear_obs,
    sigma_ensemble,
    unscented_enkf,
)
from .errors import ConfigError, DensityCollapseError, DivergenceError
from .geometry import build_basis
from .models import (
    IntegratorConfig,
    MsmModel,
    TimeSeries,
    msm_fit,
    propagate_l96_theta,
    propagate_l96l63,
    propagate_l96_stochastic,
    sample_ou_exact,
    theta_from_gamma,
)
from .semiparametric import (
    initial_semistate,
    run_filter,
    semiparametric_forecast,
)

KNOWN_METHODS = ("semiparametric", "perfect", "hmm", "msm", "persistence", "plain")
KNOWN_SYSTEMS = ("l96l63", "l96stochastic", "ou-toy")


@dataclass
class ExperimentConfig:
    """Protocol parameters for one twin experiment."""

    system: str = "l96l63"
    eps: float = 1.0
    tau: float = 0.1
    h: float = 0.01
    train_len: int = 5000
    eval_start: int = 5101      # truth index of the first evaluation observation
    n_eval: int = 1000          # evaluation observations for the filter window
    n_init: int = 100           # forecast initial conditions (desk scale)
    horizon: int = 50
    lags: Optional[int] = None  # default: 4 for l96l63, 1 for l96stochastic
    n_modes: int = 100
    obs_noise_var: float = 0.125
    seed: int = 0
    methods: tuple = ("semiparametric", "perfect", "hmm", "msm", "persistence")
    spin_up: int = 500
    q_est_len: int = 2000       # observations used by the adaptive Q sweeps
    q_est_sweeps: int = 20
    perturbation_frac: float = 0.001   # initial-condition variance fraction
    clim_steps: int = 10_000
    full_scale: bool = False

    def __post_init__(self):
        if isinstance(self.methods, str):
            self.methods = tuple(m.strip() for m in self.methods.split(",") if m.strip())
        else:
            self.methods = tuple(self.methods)
        if not self.methods:
            raise ConfigError("method list must not be empty")
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; known: {KNOWN_METHODS}")
        if self.system not in KNOWN_SYSTEMS:
            raise ConfigError(f"unknown system {self.system!r}; known: {KNOWN_SYSTEMS}")
        for name in ("eps", "tau", "h", "train_len", "n_eval", "n_init",
                     "horizon", "n_modes", "obs_noise_var"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.eval_start < self.train_len:
            raise ConfigError("evaluation window overlaps the training window")
        if self.full_scale:
            self.n_init = max(self.n_init, 1000)
        if self.lags is None:
            self.lags = {"l96l63": 4, "l96stochastic": 1, "ou-toy": 0}[self.system]

    @property
    def integ(self) -> IntegratorConfig:
        return IntegratorConfig(h=self.h, tau=self.tau)

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            for fld in dataclasses.fields(self):
                val = getattr(self, fld.name)
                if fld.name == "methods":
                    val = ",".join(val)
                f.write(f"{fld.name} = {val}\n")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        kwargs = {}
        casts = {f.name: f.type for f in dataclasses.fields(cls)}
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"cannot parse config line {line!r}")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in casts:
                    raise ConfigError(f"unknown config key {key!r}")
                kwargs[key] = _parse_value(key, raw)
        return cls(**kwargs)


def _parse_value(key, raw):
    if key in ("system",):
        return raw
    if key == "methods":
        return tuple(m.strip() for m in raw.split(",") if m.strip())
    if key == "full_scale":
        return raw.lower() in ("1", "true", "yes")
    if key == "lags":
        return None if raw == "None" else int(raw)
    if key in ("eps", "tau", "h", "obs_noise_var", "perturbation_frac"):
        return float(raw)
    return int(raw)


# ---------------------------------------------------------------------------
# system wiring


@dataclass
class SystemSpec:
    name: str
    n_x: int
    m_theta: int
    dim_full: int
    forcing: float
    propagate_x: Callable          # (x_members, theta_members) -> x_members
    propagate_full: Callable       # (z_members, rng) -> z_members
    simulate: Callable             # (z0, n_steps, rng) -> TimeSeries
    theta_of: Callable             # extended state rows -> theta rows
    initial_state: np.ndarray


def make_system(cfg: ExperimentConfig) -> SystemSpec:
    integ = cfg.integ
    if cfg.system == "l96l63":
        def prop_x(x, th):
            return propagate_l96_theta(x, np.atleast_2d(th)[:, 0], integ, 8.0)

        def prop_full(z, rng=None):
            return propagate_l96l63(z, cfg.eps, integ)

        def simulate(z0, n_steps, rng):
            out = np.empty((n_steps + 1, z0.shape[-1]))
            out[0] = z0
            z = z0
            for k in range(1, n_steps + 1):
                z = propagate_l96l63(z, cfg.eps, integ)
                out[k] = z
            return TimeSeries(values=out, dt=cfg.tau)

        z0 = np.concatenate([8.0 + np.linspace(-1, 1, 40), [1.0, 1.0, 25.0]])
        return SystemSpec(
            name="l96l63", n_x=40, m_theta=1, dim_full=43, forcing=8.0,
            propagate_x=prop_x, propagate_full=prop_full, simulate=simulate,
            theta_of=lambda z: np.atleast_2d(z)[:, 40:41] / 40.0 + 1.0,
            initial_state=z0,
        )
    if cfg.system == "l96stochastic":
        def prop_x(x, th):
            return propagate_l96_theta(x, np.atleast_2d(th), integ, 6.0)

        def prop_full(z, rng):
            return propagate_l96_stochastic(z, cfg.eps, integ, rng)

        def simulate(z0, n_steps, rng):
            out = np.empty((n_steps + 1, z0.shape[-1]))
            out[0] = z0
            z = z0
            for k in range(1, n_steps + 1):
                z = propagate_l96_stochastic(z, cfg.eps, integ, rng)
                out[k] = z
            return TimeSeries(values=out, dt=cfg.tau)

        z0 = np.concatenate([6.0 + np.linspace(-1, 1, 40), [0.0]])
        return SystemSpec(
            name="l96stochastic", n_x=40, m_theta=4, dim_full=41, forcing=6.0,
            propagate_x=prop_x, propagate_full=prop_full, simulate=simulate,
            theta_of=lambda z: theta_from_gamma(np.atleast_2d(z)[:, 40]),
            initial_state=z0,
        )
    # ou-toy: scalar x relaxing onto an OU parameter (cheap end-to-end system)
    a = np.exp(-cfg.tau)
    coupling = cfg.tau * a

    def prop_x(x, th):
        return a * x + coupling * np.atleast_2d(th)[:, :1]

    alpha, sig = 1.0, np.sqrt(2.0)
    a_th = np.exp(-alpha * cfg.tau)
    s_th = sig * np.sqrt((1 - a_th**2) / (2 * alpha))

    def prop_full(z, rng):
        z = np.atleast_2d(z)
        out = np.empty_like(z)
        out[:, 0] = a * z[:, 0] + coupling * z[:, 1]
        out[:, 1] = a_th * z[:, 1] + s_th * rng.standard_normal(z.shape[0])
        return out

    def simulate(z0, n_steps, rng):
        out = np.empty((n_steps + 1, 2))
        out[0] = z0
        z = z0[None, :]
        for k in range(1, n_steps + 1):
            z = prop_full(z, rng)
            out[k] = z[0]
        return TimeSeries(values=out, dt=cfg.tau)

    return SystemSpec(
        name="ou-toy", n_x=1, m_theta=1, dim_full=2, forcing=0.0,
        propagate_x=prop_x, propagate_full=prop_full, simulate=simulate,
        theta_of=lambda z: np.atleast_2d(z)[:, 1:2],
        initial_state=np.zeros(2),
    )


# ---------------------------------------------------------------------------
# truth data


@dataclass
class TruthData:
    states: TimeSeries            # extended truth from t=0 (post spin-up)
    theta: TimeSeries             # parameter series aligned with states
    observations: np.ndarray      # noisy x observations, obs[i] at state index i+1
    clim_error: float             # RMS deviation of x from its long-term mean
    clim_var: np.ndarray          # long-term variance of every extended component
    theta_var: np.ndarray         # long-term variance of theta components


def generate_truth(cfg: ExperimentConfig, system: SystemSpec,
                   rng: np.random.Generator) -> TruthData:
    """Spin up, then simulate long enough for training + evaluation + climatology."""
    total = max(cfg.eval_start + max(cfg.n_eval, cfg.n_init) + cfg.horizon + 1,
                cfg.clim_steps)
    full = system.simulate(system.initial_state, cfg.spin_up + total, rng)
    states = TimeSeries(values=full.values[cfg.spin_up:], dt=cfg.tau)
    theta = TimeSeries(values=system.theta_of(states.values), dt=cfg.tau)
    x = states.values[:, : system.n_x]
    noise = rng.standard_normal((len(states) - 1, system.n_x))
    observations = x[1:] + np.sqrt(cfg.obs_noise_var) * noise
    clim_x = x[-cfg.clim_steps:]
    clim_error = float(np.sqrt(np.mean(clim_x.var(axis=0))))
    clim_var = states.values[-cfg.clim_steps:].var(axis=0)
    return TruthData(
        states=states, theta=theta, observations=observations,
        clim_error=clim_error, clim_var=clim_var,
        theta_var=theta.values[-cfg.clim_steps:].var(axis=0),
    )


@dataclass
class ModelArtifact:
    """Trained nonparametric model plus the baselines' training data."""

    basis: object
    shift: object
    msm: MsmModel
    training_theta: np.ndarray    # physical (un-embedded) parameter series
    lags: int
    m_theta: int


def train_artifact(theta_series: TimeSeries, cfg: ExperimentConfig,
                   m_theta: int) -> ModelArtifact:
    embedded = delay_embed(theta_series, cfg.lags)
    basis = build_basis(embedded, n_modes=cfg.n_modes)
    shift = build_shift_operator(basis)
    return ModelArtifact(
        basis=basis, shift=shift, msm=msm_fit(theta_series),
        training_theta=theta_series.values, lags=cfg.lags, m_theta=m_theta,
    )


# ---------------------------------------------------------------------------
# skill bookkeeping


@dataclass
class SkillTable:
    methods: list
    leads: np.ndarray
    rmse: np.ndarray              # (n_methods, horizon+1)
    divergence_counts: dict
    clim_error: float
    tau: float
    n_init: int
    analysis_rmse: Optional[dict] = None
    label: str = "forecast"

    def row(self, method: str) -> np.ndarray:
        return self.rmse[self.methods.index(method)]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("lead_steps,lead_days,method,rmse\n")
            for mi, method in enumerate(self.methods):
                for li, lead in enumerate(self.leads):
                    days = lead * self.tau / 0.2
                    f.write(f"{int(lead)},{days:.6g},{method},{self.rmse[mi, li]:.10g}\n")
            for li, lead in enumerate(self.leads):
                days = lead * self.tau / 0.2
                f.write(f"{int(lead)},{days:.6g},climatology,{self.clim_error:.10g}\n")

    def summary_text(self) -> str:
        lines = [f"{self.label} experiment: {self.n_init} initial conditions, "
                 f"horizon {int(self.leads[-1])} steps "
                 f"({self.leads[-1] * self.tau / 0.2:.1f} model days)",
                 f"climatological error: {self.clim_error:.4f}", ""]
        if self.analysis_rmse:
            lines.append("analysis RMSE over the evaluation window:")
            for method, val in self.analysis_rmse.items():
                lines.append(f"  {method:15s} {val:.4f}")
            lines.append("")
        check = [int(round(x)) for x in (1, self.leads[-1] // 3, 2 * self.leads[-1] // 3,
                                         self.leads[-1])]
        lines.append("method ordering by RMSE at selected leads:")
        for lead in check:
            li = int(np.argmin(np.abs(self.leads - lead)))
            order = sorted(self.methods, key=lambda m: self.rmse[self.methods.index(m), li])
            vals = ", ".join(f"{m}={self.rmse[self.methods.index(m), li]:.3f}" for m in order)
            lines.append(f"  lead {int(self.leads[li]):3d}: {vals}")
        lines.append("")
        lines.append("divergence events per method:")
        for method in self.methods:
            lines.append(f"  {method:15s} {self.divergence_counts.get(method, 0)}")
        return "\n".join(lines) + "\n"


def _accumulate(sq_sums, counts, caps, method_idx, forecast_x, truth_x, clim_error,
                events, divergence_counts, method):
    """Add one initial condition's squared errors, applying the divergence cap."""
    horizon = truth_x.shape[0] - 1
    dead_from = events.get("diverged_at_lead", horizon + 1)
    if events.get("diverged_members", 0) or dead_from <= horizon:
        divergence_counts[method] = divergence_counts.get(method, 0) + 1
    for lead in range(horizon + 1):
        if lead >= dead_from:
            err2 = clim_error**2
            caps[method_idx, lead] += 1
        else:
            err2 = float(np.mean((forecast_x[lead] - truth_x[lead]) ** 2))
            if not np.isfinite(err2) or err2 > (10 * clim_error) ** 2:
                err2 = clim_error**2
                caps[method_idx, lead] += 1
        sq_sums[method_idx, lead] += err2
        counts[method_idx, lead] += 1


# ---------------------------------------------------------------------------
# forecast experiment (perfect training data, perturbed initial conditions)


def _perturbed_start(truth_z, clim_var, frac, theta_of, rng):
    """Gaussian perturbation with variance ``frac`` of each component's variance."""
    scale = np.sqrt(frac * clim_var)
    z_pert = truth_z + scale * rng.standard_normal(truth_z.shape)
    theta_pert = theta_of(z_pert[None, :])[0]
    return z_pert, theta_pert


def run_forecast_experiment(cfg: ExperimentConfig, truth: Optional[TruthData] = None,
                            artifact: Optional[ModelArtifact] = None) -> SkillTable:
    """Paper protocol: true parameter training series, perturbed initial states."""
    system = make_system(cfg)
    root = np.random.SeedSequence(cfg.seed)
    truth_seed, train_seed, eval_seed = root.spawn(3)
    if truth is None:
        truth = generate_truth(cfg, system, np.random.default_rng(truth_seed))
    needs_model = {"semiparametric", "hmm", "msm"} & set(cfg.methods)
    if artifact is None and needs_model:
        train = TimeSeries(values=truth.theta.values[1: cfg.train_len + 1], dt=cfg.tau)
        artifact = train_artifact(train, cfg, system.m_theta)

    n_x, m = system.n_x, system.m_theta
    horizon = cfg.horizon
    methods = list(cfg.methods)
    sq_sums = np.zeros((len(methods), horizon + 1))
    counts = np.zeros((len(methods), horizon + 1))
    caps = np.zeros((len(methods), horizon + 1))
    divergence_counts: dict = {}
    x_var = truth.clim_var[:n_x]
    theta_var = np.atleast_1d(truth.theta_var)

    ic_streams = eval_seed.spawn(cfg.n_init)
    for ic in range(cfg.n_init):
        start = cfg.eval_start + ic
        truth_z = truth.states.values[start]
        truth_x_path = truth.states.values[start: start + horizon + 1, :n_x]
        ic_rng = np.random.default_rng(ic_streams[ic])
        z_pert, theta_pert = _perturbed_start(
            truth_z, truth.clim_var, cfg.perturbation_frac, system.theta_of, ic_rng)
        x_ens = sigma_ensemble(z_pert[:n_x], np.diag(cfg.perturbation_frac * x_var))
        # embedded initial parameter state: perturbed current value plus the
        # known recent history (the training points live in delay coordinates)
        history = truth.theta.values[start - cfg.lags: start + 1][::-1]
        theta_emb = np.concatenate([theta_pert, history[1:].ravel()])
        method_streams = {meth: np.random.default_rng(s)
                          for meth, s in zip(methods, ic_streams[ic].spawn(len(methods)))}
        for mi, method in enumerate(methods):
            res = _run_forecast_method(
                method, cfg, system, artifact, x_ens, z_pert, theta_pert,
                theta_emb, truth.theta_var, truth.clim_var, method_streams[method])
            _accumulate(sq_sums, counts, caps, mi, res.x_mean, truth_x_path,
                        truth.clim_error, res.events, divergence_counts, method)

    rmse = np.sqrt(sq_sums / np.maximum(counts, 1))
    return SkillTable(
        methods=methods, leads=np.arange(horizon + 1), rmse=rmse,
        divergence_counts=divergence_counts, clim_error=truth.clim_error,
        tau=cfg.tau, n_init=cfg.n_init, label="forecast",
    )


def _initial_parameter_density(basis, center, var_vec):
    """Gaussian bump on the (embedded) training points.

    Widths are floored at the basis resolution (half the median bandwidth):
    a bump narrower than the point spacing is unrepresentable and risks
    covering no training point at all; if the bump still collapses it is
    widened until it does not.
    """
    floor = float(np.median(basis.rho)) ** 2 / 4.0 if basis.rho is not None else 0.0
    var = np.maximum(np.asarray(var_vec, dtype=float), max(floor, 1e-12))
    for _ in range(6):
        try:
            return SampledDensity.gaussian(basis, center, np.diag(var))
        except DensityCollapseError:
            var = var * 4.0
    return SampledDensity.equilibrium(basis)


def _theta_clim_var(system, clim_var, theta_var):
    """Long-term variance of the physical parameters."""
    if theta_var is not None:
        return np.atleast_1d(theta_var)
    if system.name == "l96l63":
        return np.atleast_1d(clim_var[40] / 1600.0)  # theta = a1/40 + 1
    if system.name == "l96stochastic":
        return np.full(4, 0.3**2 / 2.0)  # sinusoid of a wandering angle
    return np.atleast_1d(clim_var[1])


def _run_forecast_method(method, cfg, system, artifact, x_ens, z_pert, theta_pert,
                         theta_emb, theta_var, clim_var, rng):
    n_x, m = system.n_x, system.m_theta
    if method == "persistence":
        return baselines.persistence_forecast(
            x_ens, theta_pert, system.propagate_x, cfg.horizon)
    if method == "hmm":
        return baselines.hmm_forecast(
            x_ens, artifact.training_theta, system.propagate_x, cfg.horizon, rng)
    if method == "msm":
        s0 = cfg.perturbation_frac * _theta_clim_var(system, clim_var, theta_var)
        return baselines.msm_forecast(
            x_ens, theta_pert, s0, artifact.msm, system.propagate_x, cfg.horizon)
    if method == "plain":
        return baselines.persistence_forecast(
            x_ens, np.ones(m), system.propagate_x, cfg.horizon)
    if method == "perfect":
        z_init = z_pert.copy()
        if system.name == "l96l63":
            z_init[40] = 40.0 * (theta_pert[0] - 1.0)  # hidden state consistent
        z_ens = sigma_ensemble(z_init, np.diag(cfg.perturbation_frac * clim_var))
        return baselines.perfect_forecast(
            z_ens, lambda z: system.propagate_full(z, rng), cfg.horizon, n_x)
    if method == "semiparametric":
        var_th = cfg.perturbation_frac * _theta_clim_var(system, clim_var, theta_var)
        p0 = _initial_parameter_density(artifact.basis, theta_emb,
                                        np.tile(var_th, cfg.lags + 1))
        return semiparametric_forecast(
            x_ens, p0, system.propagate_x, artifact.basis, artifact.shift,
            cfg.horizon, rng, source_dim=m)
    raise ConfigError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# full pipeline: noise estimation, parameter recovery, filter experiment


def estimate_noise(cfg: ExperimentConfig, system: SystemSpec, truth: TruthData):
    """Adaptive estimation of the unmodeled-parameter covariance (per step)."""
    obs = truth.observations[: cfg.q_est_len]
    prior_theta = np.ones(system.m_theta) if system.name != "ou-toy" else np.zeros(1)
    return adaptive_estimate_Q(
        obs, system.propagate_x, R=cfg.obs_noise_var * np.eye(system.n_x),
        n_x=system.n_x, m_theta=system.m_theta, tau=cfg.tau,
        init_x=obs[0], init_theta=prior_theta, max_sweeps=cfg.q_est_sweeps,
    )


def recover_theta(cfg: ExperimentConfig, system: SystemSpec, truth: TruthData,
                  q_theta_step: np.ndarray) -> TimeSeries:
    """State-augmented recovery of the parameter series over the training window.

    ``q_theta_step`` is the per-step parameter noise (the Q_hat theta block
    from the adaptive estimation); the white-noise surrogate model adds it
    each assimilation cycle.
    """
    obs = truth.observations[: cfg.train_len]
    prior_theta = np.ones(system.m_theta) if system.name != "ou-toy" else np.zeros(1)
    series, _ = extract_theta_series(
        obs, system.propagate_x, linear_obs(_obs_matrix(system)),
        R=cfg.obs_noise_var * np.eye(system.n_x),
        q_theta=np.atleast_2d(q_theta_step) / cfg.tau,
        n_x=system.n_x, m_theta=system.m_theta, tau=cfg.tau,
        init_x=obs[0], init_theta=prior_theta,
    )
    return TimeSeries(values=series.values[:, system.n_x:], dt=cfg.tau)


def _obs_matrix(system: SystemSpec, dim: Optional[int] = None) -> np.ndarray:
    H = np.zeros((system.n_x, dim or (system.n_x + system.m_theta)))
    H[:, : system.n_x] = np.eye(system.n_x)
    return H


# ---------------------------------------------------------------------------
# per-method filters over the evaluation window


@dataclass
class MethodFilterRun:
    analysis_x: np.ndarray        # (T, n_x) analysis means of x
    forecast_starter: Callable    # (step, rng) -> ForecastResult | None
    diverged: bool = False


def _pad_to(arr, T, fill_row):
    if arr.shape[0] >= T:
        return arr[:T]
    pad = np.repeat(fill_row[None, :], T - arr.shape[0], axis=0)
    return np.concatenate([arr, pad], axis=0)


def _run_method_filter(method, cfg, system, artifact, truth, q_theta_step, rng):
    """One method's filter over the evaluation window, plus its forecast starter."""
    n_x, m = system.n_x, system.m_theta
    obs = truth.observations[cfg.eval_start: cfg.eval_start + cfg.n_eval]
    T = obs.shape[0]
    z0_full = truth.states.values[cfg.eval_start]
    x0 = z0_full[:n_x]
    theta0 = system.theta_of(z0_full[None, :])[0]
    clim_mean = truth.states.values[:, :n_x].mean(axis=0)
    q_theta_step = np.atleast_2d(q_theta_step)

    if method == "semiparametric":
        state0 = initial_semistate(x0, theta0, artifact.basis,
                                   q_theta=q_theta_step / cfg.tau)
        res = run_filter(
            obs, state0, system.propagate_x, linear_obs(_obs_matrix(system)),
            cfg.obs_noise_var * np.eye(n_x), artifact.basis, artifact.shift,
            tau=cfg.tau, source_dim=m,
        )
        means = _pad_to(res.analysis.values[:, :n_x], T, clim_mean)
        states = res.states[1:]

        def starter(step, srng):
            if step >= len(states):
                return None
            st = states[step]
            x_ens = sigma_ensemble(st.x, st.cov[:n_x, :n_x] + 1e-10 * np.eye(n_x))
            return semiparametric_forecast(
                x_ens, st.coeffs, system.propagate_x, artifact.basis,
                artifact.shift, cfg.horizon, srng, source_dim=m)

        return MethodFilterRun(means, starter, diverged=res.diverged_at is not None)

    if method == "perfect":
        d = system.dim_full
        init_cov = np.eye(d)
        init_cov[n_x:, n_x:] = np.diag(np.maximum(truth.clim_var[n_x:], 1e-6))
        try:
            res = unscented_enkf(
                obs, lambda ens: system.propagate_full(ens, rng),
                linear_obs(_obs_matrix(system, d)), cfg.obs_noise_var * np.eye(n_x),
                init_mean=z0_full, init_cov=init_cov,
            )
            means_full, covs, diverged = res.means, res.covs, False
        except DivergenceError as err:
            k = err.step or 0
            means_full = np.repeat(z0_full[None, :], k, axis=0)
            covs = np.repeat(init_cov[None, :, :], k, axis=0)
            diverged = True
        means = _pad_to(means_full[:, :n_x], T, clim_mean)

        def starter(step, srng):
            if step >= means_full.shape[0]:
                return None
            z_ens = sigma_ensemble(means_full[step], covs[step] + 1e-10 * np.eye(d))
            return baselines.perfect_forecast(
                z_ens, lambda z: system.propagate_full(z, srng), cfg.horizon, n_x)

        return MethodFilterRun(means, starter, diverged=diverged)

    # remaining methods: x-only or augmented unscented EnKF variants
    plain_theta = np.zeros(m) if system.name == "ou-toy" else np.ones(m)
    if method == "plain":

        def prop(ens):
            th = np.repeat(plain_theta[None, :], ens.shape[0], axis=0)
            return system.propagate_x(ens, th)

        d, init_mean, init_cov, q_step = n_x, x0, np.eye(n_x), None
    elif method == "hmm":
        training = artifact.training_theta

        def prop(ens):
            th = training[rng.integers(0, training.shape[0], size=ens.shape[0])]
            return system.propagate_x(ens, th)

        d, init_mean, init_cov, q_step = n_x, x0, np.eye(n_x), None
    elif method == "msm":
        msm = artifact.msm

        def prop(ens):
            out = np.empty_like(ens)
            out[:, :n_x] = system.propagate_x(ens[:, :n_x], ens[:, n_x:])
            out[:, n_x:] = msm.step_ensemble(ens[:, n_x:], rng)
            return out

        d = n_x + m
        init_mean = np.concatenate([x0, theta0])
        init_cov = np.eye(d)
        init_cov[n_x:, n_x:] = np.diag(np.atleast_1d(msm.variance))
        q_step = None
    elif method == "persistence":

        def prop(ens):
            out = np.empty_like(ens)
            out[:, :n_x] = system.propagate_x(ens[:, :n_x], ens[:, n_x:])
            out[:, n_x:] = ens[:, n_x:]
            return out

        d = n_x + m
        init_mean = np.concatenate([x0, theta0])
        init_cov = np.eye(d)
        init_cov[n_x:, n_x:] = q_theta_step / cfg.tau
        q_step = None
    else:
        raise ConfigError(f"unknown method {method!r}")

    try:
        res = unscented_enkf(
            obs, prop, linear_obs(_obs_matrix(system, d)),
            cfg.obs_noise_var * np.eye(n_x),
            init_mean=init_mean, init_cov=init_cov, q_step=q_step,
        )
        means_full, covs, diverged = res.means, res.covs, False
    except DivergenceError as err:
        k = err.step or 0
        means_full = np.repeat(init_mean[None, :], k, axis=0)
        covs = np.repeat(init_cov[None, :, :], k, axis=0)
        diverged = True
    means = _pad_to(means_full[:, :n_x], T, clim_mean)

    def starter(step, srng, method=method):
        if step >= means_full.shape[0]:
            return None
        mean_t, cov_t = means_full[step], covs[step]
        x_ens = sigma_ensemble(mean_t[:n_x], cov_t[:n_x, :n_x] + 1e-10 * np.eye(n_x))
        if method == "plain":
            return baselines.persistence_forecast(
                x_ens, plain_theta, system.propagate_x, cfg.horizon)
        if method == "hmm":
            return baselines.hmm_forecast(
                x_ens, artifact.training_theta, system.propagate_x, cfg.horizon, srng)
        if method == "msm":
            return baselines.msm_forecast(
                x_ens, mean_t[n_x:], np.diag(cov_t[n_x:, n_x:]).copy(),
                artifact.msm, system.propagate_x, cfg.horizon)
        return baselines.persistence_forecast(
            x_ens, mean_t[n_x:], system.propagate_x, cfg.horizon)

    return MethodFilterRun(means, starter, diverged=diverged)


def run_filter_experiment(cfg: ExperimentConfig, truth: Optional[TruthData] = None,
                          noise=None, artifact: Optional[ModelArtifact] = None,
                          recovered: Optional[TimeSeries] = None):
    """Full pipeline: noise estimation, recovery, training, filtering, forecasts.

    Returns (SkillTable carrying forecast-from-analysis RMSE plus per-method
    analysis RMSE, extras dict with the intermediate artifacts).
    """
    system = make_system(cfg)
    root = np.random.SeedSequence(cfg.seed)
    truth_seed, method_seed = root.spawn(2)
    if truth is None:
        truth = generate_truth(cfg, system, np.random.default_rng(truth_seed))
    if noise is None and artifact is None:
        noise = estimate_noise(cfg, system, truth)
    if noise is not None:
        q_theta_step = noise.theta_variance
    else:
        q_theta_step = np.diag(np.atleast_1d(truth.theta_var)) * cfg.tau
    if artifact is None:
        if recovered is None:
            recovered = recover_theta(cfg, system, truth, q_theta_step)
        artifact = train_artifact(recovered, cfg, system.m_theta)

    n_x = system.n_x
    horizon = cfg.horizon
    methods = list(cfg.methods)
    stride = max(1, cfg.n_eval // cfg.n_init)
    starts = np.arange(stride - 1, cfg.n_eval, stride)[: cfg.n_init]
    sq_sums = np.zeros((len(methods), horizon + 1))
    counts = np.zeros((len(methods), horizon + 1))
    caps = np.zeros((len(methods), horizon + 1))
    divergence_counts: dict = {}
    analysis_rmse: dict = {}

    truth_x_eval = truth.states.values[
        cfg.eval_start + 1: cfg.eval_start + 1 + cfg.n_eval, :n_x]
    method_streams = {meth: np.random.default_rng(s)
                      for meth, s in zip(methods, method_seed.spawn(len(methods)))}
    for mi, method in enumerate(methods):
        mrng = method_streams[method]
        runner = _run_method_filter(method, cfg, system, artifact, truth,
                                    q_theta_step, mrng)
        err = runner.analysis_x - truth_x_eval
        analysis_rmse[method] = float(np.mean(np.sqrt(np.mean(err**2, axis=1))))
        if runner.diverged:
            divergence_counts[method] = divergence_counts.get(method, 0) + 1
        for step in starts:
            abs_idx = cfg.eval_start + 1 + step
            truth_path = truth.states.values[abs_idx: abs_idx + horizon + 1, :n_x]
            res = runner.forecast_starter(int(step), mrng)
            if res is None:
                sq_sums[mi] += truth.clim_error**2
                counts[mi] += 1
                caps[mi] += 1
                divergence_counts[method] = divergence_counts.get(method, 0) + 1
                continue
            _accumulate(sq_sums, counts, caps, mi, res.x_mean, truth_path,
                        truth.clim_error, res.events, divergence_counts, method)

    rmse = np.sqrt(sq_sums / np.maximum(counts, 1))
    table = SkillTable(
        methods=methods, leads=np.arange(horizon + 1), rmse=rmse,
        divergence_counts=divergence_counts, clim_error=truth.clim_error,
        tau=cfg.tau, n_init=len(starts), analysis_rmse=analysis_rmse,
        label="filter-forecast",
    )
    extras = {"noise": noise, "recovered": recovered, "artifact": artifact,
              "truth": truth}
    return table, extras


# ---------------------------------------------------------------------------
# report emission


SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _svg_line(points, color, dash=None, width=1.5):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline fill="none" stroke="{color}" stroke-width="{width}"'
            f'{dash_attr} points="{pts}" />')


def render_skill_svg(table: SkillTable) -> str:
    """Minimal deterministic SVG chart: one polyline per method + climatology."""
    w, h = 640, 440
    ml, mr, mt, mb = 60, 160, 30, 50
    x0, x1 = float(table.leads[0]), float(table.leads[-1])
    ymax = max(float(np.nanmax(table.rmse)), table.clim_error) * 1.05
    ymax = max(ymax, 1e-12)

    def sx(lead):
        return ml + (lead - x0) / max(x1 - x0, 1.0) * (w - ml - mr)

    def sy(val):
        return h - mb - min(val, ymax) / ymax * (h - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        '<rect width="100%" height="100%" fill="white" />',
        f'<line x1="{ml}" y1="{h - mb}" x2="{w - mr}" y2="{h - mb}" stroke="black" />',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h - mb}" stroke="black" />',
        f'<text x="{(ml + w - mr) / 2:.0f}" y="{h - 12}" text-anchor="middle" '
        f'font-size="13">forecast lead (steps of tau = {table.tau:g})</text>',
        f'<text x="18" y="{(mt + h - mb) / 2:.0f}" font-size="13" '
        f'transform="rotate(-90 18 {(mt + h - mb) / 2:.0f})" '
        f'text-anchor="middle">RMSE</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        val = frac * ymax
        parts.append(f'<text x="{ml - 6}" y="{sy(val) + 4:.0f}" text-anchor="end" '
                     f'font-size="11">{val:.3g}</text>')
    clim_pts = [(sx(le), sy(table.clim_error)) for le in table.leads]
    parts.append(_svg_line(clim_pts, "#555555", dash="6,4", width=1.0))
    parts.append(f'<text x="{w - mr + 8}" y="{sy(table.clim_error) + 4:.0f}" '
                 f'font-size="12" fill="#555555">climatology</text>')
    for mi, method in enumerate(table.methods):
        color = SVG_COLORS[mi % len(SVG_COLORS)]
        pts = [(sx(le), sy(table.rmse[mi, li])) for li, le in enumerate(table.leads)]
        parts.append(_svg_line(pts, color))
        parts.append(f'<text x="{w - mr + 8}" y="{mt + 16 * mi + 12}" font-size="12" '
                     f'fill="{color}">{method}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(table: SkillTable, out_dir) -> dict:
    """Write skill.csv, summary.txt and skill.svg; deterministic given inputs."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "csv": os.path.join(out_dir, "skill.csv"),
        "summary": os.path.join(out_dir, "summary.txt"),
        "svg": os.path.join(out_dir, "skill.svg"),
    }
    table.to_csv(paths["csv"])
    with open(paths["summary"], "w") as f:
        f.write(table.summary_text())
    with open(paths["svg"], "w") as f:
        f.write(render_skill_svg(table))
    return paths


# ---------------------------------------------------------------------------
# artifact persistence (named-array containers)


def save_artifact(artifact: ModelArtifact, path) -> None:
    """Persist basis + shift operator + baseline fits as one named-array file."""
    import json

    basis = artifact.basis
    meta = dict(basis.meta)
    meta.update(temporal=bool(basis.temporal), eps=basis.eps,
                intrinsic_dim=basis.intrinsic_dim, lags=artifact.lags,
                m_theta=artifact.m_theta)
    np.savez_compressed(
        path,
        points=basis.points, phi=basis.phi, peq=basis.peq, eigvals=basis.eigvals,
        tau=np.float64(np.nan if basis.tau is None else basis.tau),
        source_index=basis.source_index,
        A=artifact.shift.matrix,
        training_theta=artifact.training_theta,
        msm_mean=artifact.msm.mean, msm_alpha=artifact.msm.alpha,
        msm_sigma=artifact.msm.sigma, msm_corr_time=artifact.msm.corr_time,
        meta=np.bytes_(json.dumps(meta).encode()),
    )


def load_artifact(path) -> ModelArtifact:
    import json

    from .dforecast import ShiftOperator
    from .geometry import DiffusionBasis

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        tau = float(z["tau"])
        tau = None if np.isnan(tau) else tau
        basis = DiffusionBasis(
            points=z["points"], phi=z["phi"], peq=z["peq"], eigvals=z["eigvals"],
            tau=tau, temporal=bool(meta.pop("temporal", True)),
            source_index=z["source_index"],
            eps=meta.pop("eps", None), intrinsic_dim=meta.pop("intrinsic_dim", None),
            meta=meta,
        )
        lags = int(meta.pop("lags", 0))
        m_theta = int(meta.pop("m_theta", 1))
        msm = MsmModel(mean=z["msm_mean"], alpha=z["msm_alpha"],
                       sigma=z["msm_sigma"], corr_time=z["msm_corr_time"],
                       tau=tau if tau is not None else 0.1)
        return ModelArtifact(basis=basis, shift=ShiftOperator(matrix=z["A"], tau=tau),
                             msm=msm, training_theta=z["training_theta"],
                             lags=lags, m_theta=m_theta)


def save_truth(truth: TruthData, path) -> None:
    np.savez_compressed(
        path, states=truth.states.values, theta=truth.theta.values,
        observations=truth.observations,
        clim_error=np.float64(truth.clim_error), clim_var=truth.clim_var,
        theta_var=truth.theta_var, dt=np.float64(truth.states.dt),
    )


def load_truth(path) -> TruthData:
    with np.load(path, allow_pickle=False) as z:
        dt = float(z["dt"])
        return TruthData(
            states=TimeSeries(values=z["states"], dt=dt),
            theta=TimeSeries(values=z["theta"], dt=dt),
            observations=z["observations"],
            clim_error=float(z["clim_error"]), clim_var=z["clim_var"],
            theta_var=z["theta_var"],
        )
