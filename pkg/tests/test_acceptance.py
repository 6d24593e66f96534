"""Acceptance suite: every shipped criterion at its stated tolerance.

Each test prints one `[PASS]`/`[FAIL]` line (visible with `pytest -s`)
before asserting, so a red run still reports every criterion's status.
Heavy pipelines are shared through module-scoped fixtures; the full suite
is sized for a laptop-scale run.
"""
import numpy as np
import pytest
from scipy.stats import chisquare

import semifore.harness as H
from semifore.dforecast import (
    SampledDensity,
    build_shift_operator,
    density_moments,
    forecast_coeffs,
    project_density,
    reconstruct_density,
    rejection_sample,
)
from semifore.enkf import enkf_analysis, ensemble_moments, sigma_ensemble, spd_project
from semifore.errors import DensityCollapseError
from semifore.geometry import build_basis
from semifore.models import (
    IntegratorConfig,
    integrate,
    lorenz96_rhs,
    msm_fit,
    sample_ou_exact,
    simulate_l96l63,
)
from semifore.semiparametric import (
    bayes_update_coeffs,
    noninformative_coeffs,
    semiparametric_forecast,
)

from conftest import OU_ALPHA, OU_TAU


def _report(criterion, passed, detail):
    tag = "PASS" if passed else "FAIL"
    print(f"[{tag}] criterion {criterion}: {detail}")
    return passed


# ---------------------------------------------------------------------------
# shared pipelines


@pytest.fixture(scope="module")
def fig2_table():
    """Criterion 1 protocol: perfect training data, perturbed starts."""
    cfg = H.ExperimentConfig(
        system="l96l63", eps=1.0, seed=0, n_init=100,
        methods=("semiparametric", "perfect", "hmm", "msm", "persistence"))
    return H.run_forecast_experiment(cfg)


@pytest.fixture(scope="module")
def l96l63_pipeline():
    """Criterion 2/3 pipeline: recovered training data at eps = 1."""
    cfg = H.ExperimentConfig(
        system="l96l63", eps=1.0, seed=0, n_init=100,
        methods=("semiparametric", "plain"))
    table, extras = H.run_filter_experiment(cfg)
    return cfg, table, extras


@pytest.fixture(scope="module")
def stochastic_tables():
    """Criterion 4 pipeline: the stochastic system at eps = 1."""
    cfg = H.ExperimentConfig(
        system="l96stochastic", eps=1.0, seed=0, n_init=100,
        methods=("semiparametric", "perfect"))
    table, extras = H.run_filter_experiment(cfg)
    return cfg, table, extras


# ---------------------------------------------------------------------------
# criterion 1: method-ordering reproduction (forecast experiment)


def test_criterion_1_method_ordering(fig2_table):
    table = fig2_table
    semi = table.row("semiparametric")
    others = {m: table.row(m) for m in ("hmm", "msm", "persistence")}
    ordering = all(
        semi[lead] <= min(curve[lead] for curve in others.values())
        for lead in range(16, 51))
    perfect = table.row("perfect")
    short_term = all(semi[lead] <= 1.3 * perfect[lead] for lead in range(0, 11))
    detail = (f"ordering@16-50={ordering}, short-term vs perfect={short_term} "
              f"(semi@24={semi[24]:.3f}, hmm@24={others['hmm'][24]:.3f}, "
              f"msm@24={others['msm'][24]:.3f}, pers@24={others['persistence'][24]:.3f})")
    assert _report(1, ordering and short_term, detail)
    assert ordering and short_term


# ---------------------------------------------------------------------------
# criterion 2: filter failure of the plain model + semiparametric skill


def test_criterion_2_filter_failure(l96l63_pipeline):
    cfg, table, extras = l96l63_pipeline
    plain = table.row("plain")
    clim = table.clim_error
    plain_fails = np.all(plain >= 0.95 * clim)
    semi_rmse = table.analysis_rmse["semiparametric"]
    obs_sd = float(np.sqrt(cfg.obs_noise_var))
    semi_tracks = semi_rmse < obs_sd
    detail = (f"plain forecast >= 0.95 clim everywhere={plain_fails} "
              f"(min ratio {np.min(plain / clim):.3f}); semiparametric analysis "
              f"RMSE {semi_rmse:.3f} < obs SD {obs_sd:.3f}={semi_tracks}")
    assert _report(2, plain_fails and semi_tracks, detail)
    assert plain_fails and semi_tracks


# ---------------------------------------------------------------------------
# criterion 3: adaptive parameter-variance estimation + recovery quality


@pytest.fixture(scope="module")
def variance_estimates(l96l63_pipeline):
    cfg1, _, extras1 = l96l63_pipeline
    out = {1.0: (extras1["noise"], extras1["recovered"], extras1["truth"], cfg1)}
    for eps in (0.25, 4.0):
        cfg = H.ExperimentConfig(system="l96l63", eps=eps, seed=0)
        system = H.make_system(cfg)
        truth = H.generate_truth(
            cfg, system,
            np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0]))
        noise = H.estimate_noise(cfg, system, truth)
        recovered = H.recover_theta(cfg, system, truth, noise.theta_variance) \
            if eps == 4.0 else None
        out[eps] = (noise, recovered, truth, cfg)
    return out


def test_criterion_3_parameter_variance(variance_estimates):
    paper = {0.25: 0.0192, 1.0: 0.0193, 4.0: 0.0066}
    in_band = {}
    corr = {}
    for eps, (noise, recovered, truth, cfg) in variance_estimates.items():
        est = float(noise.theta_variance[0, 0])
        in_band[eps] = 0.1 * paper[eps] <= est <= 10.0 * paper[eps]
        if recovered is not None:
            truth_theta = truth.theta.values[1: cfg.train_len + 1, 0]
            corr[eps] = float(np.corrcoef(truth_theta, recovered.values[:, 0])[0, 1])
    bands_ok = all(in_band.values())
    corr_ok = all(c >= 0.8 for c in corr.values()) and set(corr) == {1.0, 4.0}
    detail = (f"variance bands ok={in_band}; recovery corr="
              f"{ {k: round(v, 3) for k, v in corr.items()} } (need >= 0.8)")
    assert _report(3, bands_ok and corr_ok, detail)
    assert bands_ok and corr_ok


# ---------------------------------------------------------------------------
# criterion 4: stochastic model error - semiparametric beats the perfect filter


def test_criterion_4_stochastic_experiment(stochastic_tables):
    cfg, table, extras = stochastic_tables
    semi = table.row("semiparametric")
    perfect = table.row("perfect")
    beats = all(semi[lead] < perfect[lead] for lead in range(10, 41))
    detail = (f"semi < perfect at leads 10-40={beats} "
              f"(semi@20={semi[20]:.3f}, perfect@20={perfect[20]:.3f}, "
              f"semi@40={semi[40]:.3f}, perfect@40={perfect[40]:.3f})")
    assert _report(4, beats, detail)
    assert beats


# ---------------------------------------------------------------------------
# criterion 5: diffusion-forecast oracle suite on OU training data


def test_criterion_5_diffusion_forecast_oracles(ou_basis, ou_shift):
    e0 = np.zeros(ou_basis.n_modes)
    e0[0] = 1.0
    a_fix = float(np.linalg.norm(ou_shift.matrix[:, 0] - e0))
    ok_a = a_fix <= 0.05

    gram = ou_basis.phi.T @ ou_basis.phi / ou_basis.n_points
    gram_dev = float(np.abs(gram - np.eye(ou_basis.n_modes)).max())
    ok_b = gram_dev <= 0.05

    p0 = SampledDensity.gaussian(ou_basis, center=[1.5], cov=[[0.09]])
    m0 = density_moments(p0, ou_basis)[0][0]
    c = project_density(p0, ou_basis)
    ok_c = True
    worst_c = 0.0
    for lead in range(1, 11):
        c = forecast_coeffs(c, ou_shift, 1)
        mean = density_moments(reconstruct_density(c, ou_basis), ou_basis)[0][0]
        expect = m0 * np.exp(-OU_ALPHA * OU_TAU * lead)
        worst_c = max(worst_c, abs(mean - expect))
    ok_c = worst_c <= 0.10  # climatological SD is 1

    p = SampledDensity.gaussian(ou_basis, center=[0.2], cov=[[0.5**2]])
    res = rejection_sample(p, ou_basis, 100_000, np.random.default_rng(55))
    expected = 100_000 * p.values / (ou_basis.n_points * ou_basis.peq)
    counts = np.bincount(res.indices, minlength=ou_basis.n_points).astype(float)
    order = np.argsort(expected)[::-1]
    exp_s, cnt_s = expected[order], counts[order]
    big = exp_s >= 5.0
    exp_cells = np.append(exp_s[big], exp_s[~big].sum())
    cnt_cells = np.append(cnt_s[big], cnt_s[~big].sum())
    exp_cells *= cnt_cells.sum() / exp_cells.sum()
    _, pvalue = chisquare(cnt_cells, exp_cells)
    ok_d = pvalue >= 1e-3

    detail = (f"(a) |A e0 - e0|={a_fix:.4f}<=0.05={ok_a}; "
              f"(b) gram dev={gram_dev:.2e}<=0.05={ok_b}; "
              f"(c) worst mean err={worst_c:.4f}<=0.1={ok_c}; "
              f"(d) chi2 p={pvalue:.4f}>=1e-3={ok_d}")
    assert _report(5, ok_a and ok_b and ok_c and ok_d, detail)
    assert ok_a and ok_b and ok_c and ok_d


# ---------------------------------------------------------------------------
# criterion 6: exactness suite


def test_criterion_6_exactness():
    rng = np.random.default_rng(66)

    # sigma-ensemble roundtrip to 1e-10
    d = 17
    A = rng.standard_normal((d, d))
    cov = A @ A.T / d + 0.5 * np.eye(d)
    mean = rng.standard_normal(d)
    ens = sigma_ensemble(mean, cov)
    m2, c2 = ensemble_moments(ens, ddof=0)
    ok_sigma = (np.abs(m2 - mean).max() <= 1e-10
                and np.abs(c2 - cov).max() <= 1e-10 * np.abs(cov).max())

    # scalar EnKF against the closed-form Kalman update to 1e-8
    z = sigma_ensemble(np.array([0.4]), np.array([[0.16]]))
    r = 0.09
    y_obs = np.array([0.9])
    mean_a, cov_a = enkf_analysis(z, z.copy(), y_obs, np.array([[r]]))
    m0, c0 = ensemble_moments(z, ddof=0)
    gain = c0[0, 0] / (c0[0, 0] + r)
    ok_kalman = (abs(mean_a[0] - (m0[0] + gain * (y_obs[0] - m0[0]))) <= 1e-8
                 and abs(cov_a[0, 0] - (1 - gain) * c0[0, 0]) <= 1e-8)

    # MSM closed forms exact
    fit = msm_fit(sample_ou_exact(5000, 0.7, 0.4, 1.2, 0.1, rng))
    theta0, s0, lead = 1.9, 0.04, 9
    decay = np.exp(-fit.alpha * lead * fit.tau)
    ok_msm = (np.allclose(fit.forecast_mean(theta0, lead),
                          fit.mean + decay * (theta0 - fit.mean), rtol=0, atol=0)
              and np.allclose(fit.forecast_var(s0, lead),
                              fit.variance * (1 - decay**2) + decay**2 * s0,
                              rtol=0, atol=0))

    # advection orthogonality to 1e-10 relative
    ok_adv = True
    for _ in range(20):
        x = rng.standard_normal(40) * 6
        adv = lorenz96_rhs(x, forcing=0.0) + x
        ok_adv &= abs(x @ adv) <= 1e-10 * np.abs(x * adv).sum()

    # RK4 fourth-order convergence ratio 16 +- 2
    x0 = simulate_l96l63(
        np.concatenate([rng.standard_normal(40) * 2 + 2, [1.0, 1.0, 25.0]]),
        eps=1.0, n_steps=20).values[-1, :40]
    sols = {h: integrate(lambda x: lorenz96_rhs(x), x0,
                         IntegratorConfig(h=h, tau=1.0), 1).values[-1]
            for h in (0.02, 0.01, 0.005)}
    ratio = (np.linalg.norm(sols[0.02] - sols[0.01])
             / np.linalg.norm(sols[0.01] - sols[0.005]))
    ok_rk4 = 14.0 <= ratio <= 18.0

    # SPD projection idempotence (part of the same numerical-exactness bundle)
    Q = rng.standard_normal((8, 8))
    Qh = spd_project(Q)
    ok_spd = np.abs(spd_project(Qh) - Qh).max() <= 1e-12

    detail = (f"sigma={ok_sigma}, kalman={ok_kalman}, msm={ok_msm}, "
              f"advection={ok_adv}, rk4 ratio={ratio:.2f}={ok_rk4}, spd={ok_spd}")
    passed = all([ok_sigma, ok_kalman, ok_msm, ok_adv, ok_rk4, ok_spd])
    assert _report(6, passed, detail)
    assert passed


# ---------------------------------------------------------------------------
# criterion 7: robustness suite


def test_criterion_7_robustness(ou_basis, ou_shift):
    # (a) density collapse triggers the non-informative reset and is counted
    p_eq = SampledDensity.equilibrium(ou_basis)
    c_reset, collapsed = bayes_update_coeffs(
        p_eq, np.array([500.0]), np.array([[1e-4]]), ou_basis, 1)
    ok_reset = collapsed and np.allclose(c_reset, noninformative_coeffs(ou_basis))

    # (b) persistence divergence is detected, capped, and reported
    from semifore.baselines import persistence_forecast
    from semifore.models import propagate_l96_theta

    cfgI = IntegratorConfig()
    x0 = simulate_l96l63(
        np.concatenate([np.random.default_rng(7).standard_normal(40) * 2 + 2,
                        [1.0, 1.0, 25.0]]), eps=1.0, n_steps=30).values[-1, :40]
    ens = sigma_ensemble(x0, 0.01 * np.eye(40))
    res = persistence_forecast(
        ens, 2.5, lambda x, th: propagate_l96_theta(x, np.atleast_2d(th)[:, 0], cfgI),
        horizon=50)
    ok_diverge = (res.events.get("diverged_members", 0) > 0
                  and np.all(np.isfinite(res.x_mean)))

    # (c) shuffled training data rejected by the shift-operator builder
    pts = ou_basis.points[np.random.default_rng(8).permutation(ou_basis.n_points)]
    shuffled_basis = build_basis(pts, n_modes=8, temporal=False)
    try:
        build_shift_operator(shuffled_basis)
        ok_shuffle = False
    except ValueError:
        ok_shuffle = True

    detail = (f"collapse reset+counted={ok_reset}, divergence detected+finite="
              f"{ok_diverge} ({res.events.get('diverged_members', 0)} members), "
              f"shuffled rejected={ok_shuffle}")
    assert _report(7, ok_reset and ok_diverge and ok_shuffle, detail)
    assert ok_reset and ok_diverge and ok_shuffle
