"""Integration kernels: compiled extension when available, NumPy fallback otherwise.

Set ``SEMIFORE_FORCE_NUMPY=1`` to force the fallback (used by the kernel
benchmark to compare the two backends).
"""
import os

from . import _numpy_impl

if os.environ.get("SEMIFORE_FORCE_NUMPY"):
    _impl = _numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import _fast as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _numpy_impl
        BACKEND = "numpy"

l96_theta_rhs = _impl.l96_theta_rhs
rk4_l96_theta = _impl.rk4_l96_theta
rk4_l96l63 = _impl.rk4_l96l63
step_l96_stochastic = _impl.step_l96_stochastic
theta_from_gamma = _numpy_impl.theta_from_gamma
