"""Semiparametric forecast/filter orchestration and the baseline forecasters."""
import numpy as np
import pytest

from semifore.baselines import (
    hmm_forecast,
    msm_forecast,
    perfect_forecast,
    persistence_forecast,
)
from semifore.dforecast import (
    SampledDensity,
    ShiftOperator,
    density_moments,
    forecast_coeffs,
    project_density,
)
from semifore.enkf import linear_obs, sigma_ensemble
from semifore.geometry import DiffusionBasis
from semifore.models import (
    IntegratorConfig,
    msm_fit,
    propagate_l96_theta,
    sample_ou_exact,
    simulate_l96l63,
)
from semifore.semiparametric import (
    bayes_update_coeffs,
    initial_semistate,
    noninformative_coeffs,
    run_filter,
    semiparametric_filter_step,
    semiparametric_forecast,
)

from conftest import OU_ALPHA, OU_TAU

CFG = IntegratorConfig()
RNG = np.random.default_rng(31)


def _l96_prop(forcing=8.0):
    def prop(x, theta):
        return propagate_l96_theta(x, np.atleast_2d(theta)[:, 0], CFG, forcing)

    return prop


def _degenerate_basis(value=1.0, n=8):
    """Parameter space collapsed to a single value: sampling always returns it."""
    pts = np.full((n, 1), value)
    return DiffusionBasis(
        points=pts, phi=np.ones((n, 1)), peq=np.ones(n),
        eigvals=np.zeros(1), tau=0.1, temporal=True,
    )


def _spun_x(seed=0):
    rng = np.random.default_rng(seed)
    z0 = np.concatenate([rng.standard_normal(40) * 2 + 2, [1.0, 1.0, 25.0]])
    return simulate_l96l63(z0, 1.0, 30).values[-1, :40]


class TestSemiparametricForecast:
    def test_point_mass_parameter_reduces_to_plain_l96(self):
        basis = _degenerate_basis(1.0)
        op = ShiftOperator(matrix=np.ones((1, 1)), tau=0.1)
        x0 = _spun_x()
        ens = sigma_ensemble(x0, 0.01 * np.eye(40))
        res = semiparametric_forecast(
            ens, SampledDensity.equilibrium(basis), _l96_prop(), basis, op,
            horizon=10, rng=np.random.default_rng(1), source_dim=1,
        )
        plain = np.array(ens)
        expect = [plain.mean(axis=0)]
        for _ in range(10):
            plain = propagate_l96_theta(plain, 1.0, CFG)
            expect.append(plain.mean(axis=0))
        assert np.array_equal(res.x_mean, np.asarray(expect))

    def test_coefficients_independent_of_state(self, ou_basis, ou_shift):
        p0 = SampledDensity.gaussian(ou_basis, center=[0.8], cov=[[0.09]])
        c0 = project_density(p0, ou_basis)
        ens = sigma_ensemble(_spun_x(1), 0.01 * np.eye(40))
        res = semiparametric_forecast(
            ens, p0, _l96_prop(), ou_basis, ou_shift,
            horizon=12, rng=np.random.default_rng(2), source_dim=1,
        )
        for lead in range(13):
            expect = forecast_coeffs(c0, ou_shift, lead)
            assert np.array_equal(res.coeff_history[lead], expect)

    def test_theta_mean_tracks_analytic_ou_decay(self, ou_basis, ou_shift):
        p0 = SampledDensity.gaussian(ou_basis, center=[1.5], cov=[[0.09]])
        m0 = density_moments(p0, ou_basis)[0][0]
        ens = sigma_ensemble(np.full(4, 8.0), 0.0001 * np.eye(4))

        def cheap_prop(x, theta):  # parameter forecast is what we measure here
            return x

        res = semiparametric_forecast(
            ens, p0, cheap_prop, ou_basis, ou_shift,
            horizon=10, rng=np.random.default_rng(3), source_dim=1,
        )
        clim_sd = 1.0
        for lead in range(11):
            expect = m0 * np.exp(-OU_ALPHA * OU_TAU * lead)
            assert abs(res.theta_mean[lead, 0] - expect) <= 0.10 * clim_sd

    def test_density_collapse_resets_and_counts(self, ou_basis):
        # a shift operator that annihilates every mode collapses the density
        op = ShiftOperator(matrix=np.zeros((ou_basis.n_modes, ou_basis.n_modes)),
                           tau=0.1)
        ens = sigma_ensemble(np.full(4, 8.0), 0.0001 * np.eye(4))
        res = semiparametric_forecast(
            ens, SampledDensity.equilibrium(ou_basis), lambda x, t: x,
            ou_basis, op, horizon=3, rng=np.random.default_rng(4), source_dim=1,
        )
        assert res.events["density_collapses"] == 3
        e0 = np.zeros(ou_basis.n_modes)
        e0[0] = 1.0
        assert np.allclose(res.coeff_history[-1], e0, atol=1e-12)

    def test_divergent_members_replaced_and_counted(self, ou_basis, ou_shift):
        p0 = SampledDensity.equilibrium(ou_basis)
        ens = sigma_ensemble(np.full(6, 1.0), 0.01 * np.eye(6))

        calls = {"n": 0}

        def flaky_prop(x, theta):
            calls["n"] += 1
            out = x.copy()
            if calls["n"] == 1:
                out[0] = np.inf  # one member blows up on the first step
            return out

        res = semiparametric_forecast(
            ens, p0, flaky_prop, ou_basis, ou_shift,
            horizon=2, rng=np.random.default_rng(5), source_dim=1,
        )
        assert res.events["diverged_members"] == 1
        assert np.all(np.isfinite(res.x_mean))


class TestFilterStep:
    @staticmethod
    def _toy_prop(a=np.exp(-0.1)):
        def prop(x, theta):
            return a * x + (1 - a) * theta[:, :1]

        return prop

    def test_noninformative_initialization(self, ou_basis):
        state = initial_semistate(np.zeros(1), np.zeros(1), ou_basis,
                                  q_theta=np.array([[0.1]]))
        e0 = np.zeros(ou_basis.n_modes)
        e0[0] = 1.0
        assert np.allclose(state.coeffs, e0, atol=1e-12)
        assert state.cov[0, 0] == 1.0
        assert state.cov[1, 1] == pytest.approx(0.1)

    def test_step_is_deterministic(self, ou_basis, ou_shift):
        state = initial_semistate(np.zeros(1), np.zeros(1), ou_basis,
                                  q_theta=np.array([[0.5]]))
        args = (np.array([0.4]), self._toy_prop(), linear_obs(np.array([[1.0, 0.0]])),
                np.array([[0.25]]), ou_basis, ou_shift)
        s1 = semiparametric_filter_step(state, *args, source_dim=1)
        s2 = semiparametric_filter_step(state, *args, source_dim=1)
        assert np.array_equal(s1.mean, s2.mean)
        assert np.array_equal(s1.cov, s2.cov)
        assert np.array_equal(s1.coeffs, s2.coeffs)

    def test_peaked_likelihood_concentrates_density(self, ou_basis):
        # equilibrium N(0,1) times a sharp N(target, s^2) likelihood is the
        # product Gaussian N(target/(1+s^2), s^2/(1+s^2)); at s near the
        # basis resolution the density must concentrate there
        p_f = SampledDensity.equilibrium(ou_basis)
        target, s2 = float(ou_basis.points[777, 0]), 0.1**2
        c_a, collapsed = bayes_update_coeffs(
            p_f, np.array([target]), np.array([[s2]]), ou_basis, 1)
        assert not collapsed
        from semifore.dforecast import reconstruct_density

        mean, cov = density_moments(reconstruct_density(c_a, ou_basis), ou_basis)
        assert mean[0] == pytest.approx(target / (1 + s2), abs=0.05)
        assert cov[0, 0] <= 0.10  # much sharper than the unit-variance climatology

    def test_flat_likelihood_keeps_coefficients(self, ou_basis):
        p_f = SampledDensity.gaussian(ou_basis, center=[0.6], cov=[[0.2]])
        c_f = project_density(p_f, ou_basis)
        c_a, collapsed = bayes_update_coeffs(
            p_f, np.array([0.0]), np.array([[1e12]]), ou_basis, 1)
        assert not collapsed
        assert np.linalg.norm(c_a - c_f) <= 1e-6

    def test_off_support_likelihood_collapses_to_prior(self, ou_basis):
        p_f = SampledDensity.equilibrium(ou_basis)
        c_a, collapsed = bayes_update_coeffs(
            p_f, np.array([500.0]), np.array([[1e-4]]), ou_basis, 1)
        assert collapsed
        e0 = np.zeros(ou_basis.n_modes)
        e0[0] = 1.0
        assert np.allclose(c_a, e0, atol=1e-12)


class TestRunFilter:
    def test_zero_observations_returns_initial_state(self, ou_basis, ou_shift):
        state = initial_semistate(np.zeros(1), np.zeros(1), ou_basis,
                                  q_theta=np.array([[0.5]]))
        res = run_filter(
            np.empty((0, 1)), state, TestFilterStep._toy_prop(),
            linear_obs(np.array([[1.0, 0.0]])), np.array([[0.25]]),
            ou_basis, ou_shift, tau=0.1,
        )
        assert res.states == [state]
        assert res.diverged_at is None

    def test_tracks_exact_kalman_filter(self, ou_basis, ou_shift):
        # scalar linear pair: xdot = -x + theta, theta an OU process; the
        # jointly Gaussian truth admits an exact Kalman filter oracle
        rng = np.random.default_rng(6)
        tau, alpha = OU_TAU, OU_ALPHA
        a = np.exp(-tau)
        F = np.array([[a, tau * a], [0.0, a]])  # expm of [[-1,1],[0,-1]] tau
        # Van Loan for the discrete noise covariance driven by theta noise
        sig2 = 2.0 * alpha
        A = np.array([[-1.0, 1.0], [0.0, -alpha]])
        L = np.array([[0.0], [np.sqrt(sig2)]])
        M = np.zeros((4, 4))
        M[:2, :2] = -A
        M[:2, 2:] = L @ L.T
        M[2:, 2:] = A.T
        from scipy.linalg import expm

        E = expm(M * tau)
        Qd = E[2:, 2:].T @ E[:2, 2:]
        Qd = (Qd + Qd.T) / 2

        T = 300
        r = 0.25
        z = np.array([0.0, 0.0])
        obs = np.empty((T, 1))
        truth = np.empty((T, 2))
        chol = np.linalg.cholesky(Qd + 1e-14 * np.eye(2))
        for t in range(T):
            z = F @ z + chol @ rng.standard_normal(2)
            truth[t] = z
            obs[t] = z[0] + np.sqrt(r) * rng.standard_normal()

        # exact Kalman oracle
        km = np.zeros(2)
        P = np.eye(2)
        H = np.array([[1.0, 0.0]])
        k_means = np.empty((T, 2))
        for t in range(T):
            km = F @ km
            P = F @ P @ F.T + Qd
            S = H @ P @ H.T + r
            Kg = P @ H.T / S
            km = km + (Kg * (obs[t, 0] - km[0])).ravel()
            P = P - Kg @ H @ P
            k_means[t] = km

        def prop(x, theta):  # exact discrete map of the parametric block
            return F[0, 0] * x + F[0, 1] * theta[:, :1]

        state = initial_semistate(np.zeros(1), np.zeros(1), ou_basis,
                                  q_theta=np.array([[0.5]]))
        res = run_filter(
            obs, state, prop, linear_obs(np.array([[1.0, 0.0]])),
            np.array([[r]]), ou_basis, ou_shift, tau=tau,
        )
        # near-optimality: the semiparametric skill stays within 10% of the
        # optimal filter's steady SD, and the two analysis paths agree
        steady_sd = np.sqrt(P[0, 0])
        err_semi = np.sqrt(np.mean((res.analysis.values[50:, 0] - truth[50:, 0]) ** 2))
        err_kf = np.sqrt(np.mean((k_means[50:, 0] - truth[50:, 0]) ** 2))
        assert err_semi <= err_kf + 0.10 * steady_sd
        assert np.corrcoef(res.analysis.values[50:, 0], k_means[50:, 0])[0, 1] >= 0.9
        assert res.diverged_at is None


class TestBaselines:
    def test_persistence_at_unit_theta_is_plain_l96(self):
        x0 = _spun_x(2)
        ens = sigma_ensemble(x0, 0.01 * np.eye(40))
        res = persistence_forecast(ens, 1.0, _l96_prop(), horizon=8)
        plain = np.array(ens)
        for lead in range(1, 9):
            plain = propagate_l96_theta(plain, 1.0, CFG)
            assert np.array_equal(res.x_mean[lead], plain.mean(axis=0))

    def test_zero_horizon_returns_initial_mean(self):
        ens = sigma_ensemble(np.full(40, 8.0), np.eye(40))
        res = persistence_forecast(ens, 1.0, _l96_prop(), horizon=0)
        assert res.x_mean.shape == (1, 40)
        assert np.allclose(res.x_mean[0], 8.0)

    def test_persistence_far_theta_diverges_and_is_recorded(self):
        x0 = _spun_x(3)
        ens = sigma_ensemble(x0, 0.01 * np.eye(40))
        res = persistence_forecast(ens, 2.5, _l96_prop(), horizon=50)
        assert res.events.get("diverged_members", 0) > 0
        assert np.all(np.isfinite(res.x_mean))

    def test_hmm_samples_come_from_training_set(self, ou_series):
        thetas = ou_series.values
        seen = set(np.round(thetas[:, 0], 12))
        ens = sigma_ensemble(np.full(40, 2.0), 0.01 * np.eye(40))
        draws = []

        def spy_prop(x, theta):
            draws.append(theta.copy())
            return x

        hmm_forecast(ens, thetas, spy_prop, horizon=5, rng=np.random.default_rng(8))
        for block in draws:
            assert set(np.round(block[:, 0], 12)) <= seen
        stacked = np.concatenate(draws)
        assert abs(stacked.mean() - thetas.mean()) <= 3 * thetas.std() / np.sqrt(stacked.size / 5)

    def test_msm_fixed_point_and_closed_forms(self, ou_series):
        fit = msm_fit(ou_series)
        ens = sigma_ensemble(np.full(40, 2.0), 0.01 * np.eye(40))
        res = msm_forecast(ens, fit.mean, fit.variance, fit, lambda x, t: x, horizon=6)
        assert np.allclose(res.theta_mean, fit.mean[None, :].repeat(7, axis=0))
        res2 = msm_forecast(ens, np.array([1.4]), np.array([0.01]), fit,
                            lambda x, t: x, horizon=6)
        for lead in range(7):
            assert res2.theta_mean[lead] == pytest.approx(
                fit.forecast_mean(np.array([1.4]), lead))
            assert res2.theta_var[lead] == pytest.approx(
                fit.forecast_var(np.array([0.01]), lead))

    def test_perfect_forecast_of_exact_state_is_truth(self):
        z0 = np.concatenate([_spun_x(4), [2.0, 1.5, 22.0]])
        truth = simulate_l96l63(z0, 1.0, 10)
        ens = np.repeat(z0[None, :], 86, axis=0)  # zero-spread ensemble

        def prop_full(z):
            from semifore.models import propagate_l96l63

            return propagate_l96l63(z, 1.0, CFG)

        res = perfect_forecast(ens, prop_full, horizon=10, n_x=40)
        assert np.allclose(res.x_mean, truth.values[:, :40], atol=1e-12)
