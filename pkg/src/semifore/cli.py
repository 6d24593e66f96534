"""Command-line driver for the twin-experiment workflow.

Stages write their outputs into --out-dir and later stages pick them up
from there, so a full run is either one `benchmark` call or the chain
simulate -> estimate-noise -> recover-theta -> train -> filter/forecast.
"""
import argparse
import os
import sys

import numpy as np

from . import harness
from .errors import SemiforeError
from .models import TimeSeries


def _add_common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--epsilon", type=float, help="time-scale parameter of the hidden dynamics")
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.add_argument("--system", help="l96l63 | l96stochastic | ou-toy")
    p.add_argument("--full-scale", action="store_true",
                   help="paper-scale evaluation (1000 initial conditions)")


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        cfg = harness.ExperimentConfig.from_file(args.config)
    else:
        cfg = harness.ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.epsilon is not None:
        updates["eps"] = args.epsilon
    if args.methods:
        updates["methods"] = args.methods
    if args.system:
        updates["system"] = args.system
    if args.full_scale:
        updates["full_scale"] = True
    if updates:
        import dataclasses

        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def _get_truth(cfg, out_dir):
    path = os.path.join(out_dir, "truth.npz")
    if os.path.exists(path):
        return harness.load_truth(path)
    system = harness.make_system(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    truth = harness.generate_truth(cfg, system, rng)
    os.makedirs(out_dir, exist_ok=True)
    harness.save_truth(truth, path)
    return truth


def cmd_simulate(args):
    cfg = _load_config(args)
    truth = _get_truth(cfg, args.out_dir)
    truth.states.save_csv(os.path.join(args.out_dir, "truth.csv"))
    truth.theta.save_csv(os.path.join(args.out_dir, "theta_true.csv"))
    obs = TimeSeries(values=truth.observations, dt=cfg.tau, t0=cfg.tau)
    obs.save_csv(os.path.join(args.out_dir, "observations.csv"))
    print(f"simulated {len(truth.states)} states of {cfg.system} "
          f"(eps={cfg.eps}); climatological error {truth.clim_error:.4f}")
    print(f"wrote truth.npz, truth.csv, theta_true.csv, observations.csv "
          f"in {args.out_dir}")


def cmd_estimate_noise(args):
    cfg = _load_config(args)
    truth = _get_truth(cfg, args.out_dir)
    system = harness.make_system(cfg)
    noise = harness.estimate_noise(cfg, system, truth)
    noise.save(os.path.join(args.out_dir, "noise.npz"))
    var = np.diag(noise.theta_variance)
    print(f"adaptive Q finished after {noise.sweeps} sweeps "
          f"(converged={noise.converged})")
    print(f"estimated Var(theta) per step: {np.array2string(var, precision=5)}")
    print(f"true Var(theta):               "
          f"{np.array2string(np.atleast_1d(truth.theta_var), precision=5)}")


def cmd_recover_theta(args):
    cfg = _load_config(args)
    truth = _get_truth(cfg, args.out_dir)
    system = harness.make_system(cfg)
    noise_path = os.path.join(args.out_dir, "noise.npz")
    if os.path.exists(noise_path):
        with np.load(noise_path) as z:
            q_step = z["theta_variance"]
    else:
        noise = harness.estimate_noise(cfg, system, truth)
        noise.save(noise_path)
        q_step = noise.theta_variance
    recovered = harness.recover_theta(cfg, system, truth, q_step)
    recovered_path = os.path.join(args.out_dir, "theta_recovered.csv")
    with open(recovered_path, "w") as f:
        cols = ",".join(f"theta_{j + 1}" for j in range(recovered.dim))
        f.write(f"t,{cols}\n")
        for t, row in zip(recovered.t, recovered.values):
            f.write(f"{t:.10g}," + ",".join(f"{v:.10g}" for v in row) + "\n")
    truth_theta = truth.theta.values[1: cfg.train_len + 1]
    corr = [float(np.corrcoef(truth_theta[:, j], recovered.values[:, j])[0, 1])
            for j in range(recovered.dim)]
    print(f"recovered {len(recovered)} parameter samples -> {recovered_path}")
    print(f"correlation with truth: {np.array2string(np.array(corr), precision=3)}")


def cmd_train(args):
    cfg = _load_config(args)
    truth = _get_truth(cfg, args.out_dir)
    system = harness.make_system(cfg)
    rec_path = os.path.join(args.out_dir, "theta_recovered.csv")
    if args.training == "recovered" and os.path.exists(rec_path):
        data = np.loadtxt(rec_path, delimiter=",", skiprows=1, ndmin=2)
        series = TimeSeries(values=data[:, 1:], dt=cfg.tau)
        source = "recovered"
    else:
        series = TimeSeries(values=truth.theta.values[1: cfg.train_len + 1],
                            dt=cfg.tau)
        source = "true"
    artifact = harness.train_artifact(series, cfg, system.m_theta)
    path = os.path.join(args.out_dir, "model.npz")
    harness.save_artifact(artifact, path)
    basis = artifact.basis
    print(f"trained on {source} parameter series "
          f"({basis.n_points} points after embedding/trim, "
          f"{basis.n_modes} modes, intrinsic dim {basis.intrinsic_dim})")
    print(f"wrote {path}")


def cmd_filter(args):
    cfg = _load_config(args)
    truth = _get_truth(cfg, args.out_dir)
    system = harness.make_system(cfg)
    model_path = os.path.join(args.out_dir, "model.npz")
    if not os.path.exists(model_path):
        raise SystemExit("no model.npz in the output directory; run `train` first")
    artifact = harness.load_artifact(model_path)
    noise_path = os.path.join(args.out_dir, "noise.npz")
    if os.path.exists(noise_path):
        with np.load(noise_path) as z:
            q_step = z["theta_variance"]
    else:
        q_step = np.diag(np.atleast_1d(truth.theta_var)) * cfg.tau
    rng = np.random.default_rng(cfg.seed)
    runner = harness._run_method_filter(
        "semiparametric", cfg, system, artifact, truth, q_step, rng)
    analysis = TimeSeries(values=runner.analysis_x, dt=cfg.tau,
                          t0=(cfg.eval_start + 1) * cfg.tau)
    analysis.save_csv(os.path.join(args.out_dir, "analysis.csv"))
    truth_x = truth.states.values[
        cfg.eval_start + 1: cfg.eval_start + 1 + cfg.n_eval, : system.n_x]
    rmse = float(np.mean(np.sqrt(np.mean((runner.analysis_x - truth_x) ** 2, axis=1))))
    print(f"semiparametric filter over {cfg.n_eval} observations: "
          f"analysis RMSE {rmse:.4f} "
          f"(observation noise SD {np.sqrt(cfg.obs_noise_var):.4f})")
    print(f"wrote {os.path.join(args.out_dir, 'analysis.csv')}")


def cmd_forecast(args):
    cfg = _load_config(args)
    truth = _get_truth(cfg, args.out_dir)
    table = harness.run_forecast_experiment(cfg, truth=truth)
    paths = harness.emit_report(table, args.out_dir)
    print(table.summary_text())
    print(f"wrote {paths['csv']}, {paths['summary']}, {paths['svg']}")


def cmd_benchmark(args):
    cfg = _load_config(args)
    truth = _get_truth(cfg, args.out_dir)
    table, extras = harness.run_filter_experiment(cfg, truth=truth)
    paths = harness.emit_report(table, args.out_dir)
    if extras["noise"] is not None:
        extras["noise"].save(os.path.join(args.out_dir, "noise.npz"))
    if extras["artifact"] is not None:
        harness.save_artifact(extras["artifact"],
                              os.path.join(args.out_dir, "model.npz"))
    print(table.summary_text())
    print(f"wrote {paths['csv']}, {paths['summary']}, {paths['svg']}")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="semifore",
        description="Semiparametric forecasting and filtering twin experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    specs = [
        ("simulate", cmd_simulate, "generate a truth trajectory and noisy observations"),
        ("estimate-noise", cmd_estimate_noise, "adaptive estimation of the parameter noise covariance"),
        ("recover-theta", cmd_recover_theta, "recover the hidden parameter series by state augmentation"),
        ("train", cmd_train, "build the nonparametric basis and shift operator"),
        ("filter", cmd_filter, "run the semiparametric filter over the evaluation window"),
        ("forecast", cmd_forecast, "forecast-skill experiment with perfect training data"),
        ("benchmark", cmd_benchmark, "full pipeline benchmark (noise, recovery, filters, forecasts)"),
    ]
    for name, fn, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "train":
            p.add_argument("--training", choices=("recovered", "true"),
                           default="recovered",
                           help="parameter series used for training")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except SemiforeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
