"""Compare the compiled integration kernels against the NumPy fallback.

Run as `python benchmarks/bench_kernels.py`. Shapes mirror the twin
experiments: 82-86 member ensembles, 40-43 dimensional states, ten RK4
substeps per observation interval.
"""
import time

import numpy as np

from semifore._kernels import _numpy_impl

try:
    from semifore._kernels import _fast
except ImportError:
    _fast = None

H, NSUB = 0.01, 10
REPEAT = 300


def _time(fn, *args):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(REPEAT):
        fn(*args)
    return (time.perf_counter() - t0) / REPEAT * 1e3  # ms per call


def main():
    rng = np.random.default_rng(0)
    x82 = np.ascontiguousarray(rng.standard_normal((82, 40)) * 3 + 2)
    theta = np.full((82, 40), 1.0)
    z86 = np.ascontiguousarray(
        np.concatenate([rng.standard_normal((86, 40)) * 3 + 2,
                        rng.standard_normal((86, 3)) * 5], axis=1))
    z82 = np.ascontiguousarray(
        np.concatenate([x82, rng.standard_normal((82, 1))], axis=1))
    noise = rng.standard_normal((82, NSUB))

    cases = [
        ("rk4_l96_theta (82x40)",
         lambda m: m.rk4_l96_theta(x82, theta, 8.0, H, NSUB)),
        ("rk4_l96l63 (86x43)",
         lambda m: m.rk4_l96l63(z86, 1.0, 8.0, H, NSUB)),
        ("step_l96_stochastic (82x41)",
         lambda m: m.step_l96_stochastic(z82, 1.0, 6.0, H, NSUB, noise)),
    ]
    print(f"{'kernel':32s} {'numpy':>10s} {'compiled':>10s} {'speedup':>9s}")
    for name, call in cases:
        t_np = _time(call, _numpy_impl)
        if _fast is None:
            print(f"{name:32s} {t_np:8.3f}ms {'n/a':>10s} {'n/a':>9s}")
            continue
        t_c = _time(call, _fast)
        a = call(_numpy_impl)
        b = call(_fast)
        assert np.allclose(a, b, rtol=0, atol=1e-12), name
        print(f"{name:32s} {t_np:8.3f}ms {t_c:8.3f}ms {t_np / t_c:8.1f}x")
    if _fast is None:
        print("\ncompiled extension not built; showing fallback only")


if __name__ == "__main__":
    main()
