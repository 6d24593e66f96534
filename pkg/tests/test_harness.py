"""Experiment configuration, protocol bookkeeping, and report emission."""
import os

import numpy as np
import pytest

import semifore.harness as H
from semifore.errors import ConfigError

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "golden_skill.csv")


def _toy_cfg(**kw):
    base = dict(system="ou-toy", n_eval=30, n_init=6, horizon=8, train_len=1500,
                eval_start=1600, q_est_len=2000, q_est_sweeps=4, clim_steps=3000,
                seed=11, methods=("semiparametric", "msm", "persistence"))
    base.update(kw)
    return H.ExperimentConfig(**base)


class TestConfig:
    def test_empty_methods_rejected(self):
        with pytest.raises(ConfigError):
            H.ExperimentConfig(methods=())

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            H.ExperimentConfig(methods=("semiparametric", "oracle"))

    def test_unknown_system_rejected(self):
        with pytest.raises(ConfigError):
            H.ExperimentConfig(system="l63")

    def test_overlapping_windows_rejected(self):
        with pytest.raises(ConfigError):
            H.ExperimentConfig(train_len=5000, eval_start=4000)

    def test_default_lags_per_system(self):
        assert H.ExperimentConfig(system="l96l63").lags == 4
        assert H.ExperimentConfig(system="l96stochastic").lags == 1

    def test_file_roundtrip(self, tmp_path):
        cfg = _toy_cfg(eps=2.5, methods=("hmm", "perfect"))
        path = tmp_path / "exp.cfg"
        cfg.to_file(path)
        back = H.ExperimentConfig.from_file(path)
        assert back == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("system = ou-toy\nwidgets = 7\n")
        with pytest.raises(ConfigError):
            H.ExperimentConfig.from_file(path)

    def test_full_scale_bumps_initial_conditions(self):
        cfg = H.ExperimentConfig(full_scale=True)
        assert cfg.n_init >= 1000


@pytest.fixture(scope="module")
def toy_table():
    return H.run_forecast_experiment(_toy_cfg())


class TestForecastExperiment:
    def test_lead_zero_is_initialization_error(self, toy_table):
        # all methods share the perturbed start, so lead-0 errors agree
        col = toy_table.rmse[:, 0]
        assert np.allclose(col, col[0], rtol=1e-9)
        assert np.all(col > 0)

    def test_reproducible_given_config(self, toy_table):
        again = H.run_forecast_experiment(_toy_cfg())
        assert np.array_equal(again.rmse, toy_table.rmse)

    def test_perfect_from_unperturbed_state_is_exact(self):
        cfg = _toy_cfg(system="l96l63", methods=("perfect",),
                       perturbation_frac=1e-22, n_init=2, horizon=5,
                       train_len=200, eval_start=210, n_eval=10, clim_steps=500)
        table = H.run_forecast_experiment(cfg)
        assert np.all(table.rmse <= 1e-8)

    def test_rmse_never_negative_and_capped(self, toy_table):
        assert np.all(toy_table.rmse >= 0)
        assert np.all(toy_table.rmse <= 10 * toy_table.clim_error + 1e-12)


class TestReports:
    def test_csv_schema(self, toy_table, tmp_path):
        paths = H.emit_report(toy_table, tmp_path)
        lines = open(paths["csv"]).read().splitlines()
        assert lines[0] == "lead_steps,lead_days,method,rmse"
        row = lines[1].split(",")
        assert int(row[0]) == 0
        assert float(row[1]) == pytest.approx(0.0)
        # lead_days = lead_steps * tau / 0.2
        last_method_rows = [l for l in lines[1:] if l.split(",")[2] == "persistence"]
        steps, days = int(last_method_rows[-1].split(",")[0]), float(
            last_method_rows[-1].split(",")[1])
        assert days == pytest.approx(steps * toy_table.tau / 0.2)
        methods_in_csv = {l.split(",")[2] for l in lines[1:]}
        assert methods_in_csv == set(toy_table.methods) | {"climatology"}

    def test_svg_structure(self, toy_table, tmp_path):
        paths = H.emit_report(toy_table, tmp_path)
        svg = open(paths["svg"]).read()
        assert svg.count("<polyline") == len(toy_table.methods) + 1
        assert "climatology" in svg

    def test_emission_deterministic(self, toy_table, tmp_path):
        p1 = H.emit_report(toy_table, tmp_path / "a")
        p2 = H.emit_report(toy_table, tmp_path / "b")
        for key in p1:
            assert open(p1[key]).read() == open(p2[key]).read()

    def test_summary_mentions_divergence_counts(self, toy_table, tmp_path):
        paths = H.emit_report(toy_table, tmp_path)
        text = open(paths["summary"]).read()
        assert "divergence events" in text
        for method in toy_table.methods:
            assert method in text

    def test_golden_csv(self, tmp_path):
        cfg = H.ExperimentConfig(
            system="ou-toy", n_eval=20, n_init=4, horizon=6, train_len=1200,
            eval_start=1300, clim_steps=2000, seed=2024,
            methods=("semiparametric", "persistence"))
        table = H.run_forecast_experiment(cfg)
        paths = H.emit_report(table, tmp_path)
        produced = open(paths["csv"]).read()
        if not os.path.exists(GOLDEN):  # pragma: no cover - freeze once
            os.makedirs(os.path.dirname(GOLDEN), exist_ok=True)
            with open(GOLDEN, "w") as f:
                f.write(produced)
        assert produced == open(GOLDEN).read()


class TestTruthData:
    def test_observation_alignment_and_noise_level(self):
        cfg = _toy_cfg()
        system = H.make_system(cfg)
        truth = H.generate_truth(cfg, system, np.random.default_rng(5))
        resid = truth.observations - truth.states.values[1:, : system.n_x]
        assert resid.std() == pytest.approx(np.sqrt(cfg.obs_noise_var), rel=0.05)

    def test_artifact_roundtrip(self, tmp_path):
        cfg = _toy_cfg()
        system = H.make_system(cfg)
        truth = H.generate_truth(cfg, system, np.random.default_rng(6))
        series = H.TimeSeries(values=truth.theta.values[1: cfg.train_len + 1],
                              dt=cfg.tau)
        artifact = H.train_artifact(series, cfg, system.m_theta)
        path = tmp_path / "model.npz"
        H.save_artifact(artifact, path)
        back = H.load_artifact(path)
        assert np.array_equal(back.basis.phi, artifact.basis.phi)
        assert np.array_equal(back.shift.matrix, artifact.shift.matrix)
        assert np.array_equal(back.training_theta, artifact.training_theta)
        assert back.lags == artifact.lags
        assert np.allclose(back.msm.alpha, artifact.msm.alpha)
