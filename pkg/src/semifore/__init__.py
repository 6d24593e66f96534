"""Semiparametric forecasting and filtering.

Corrects low-dimensional model error in parametric dynamical models by
learning a nonparametric (diffusion-maps) model for time-varying
parameters, then combining it with ensemble forecasting and Kalman
filtering. The hot integration kernels use a compiled extension when
available; see ``semifore._kernels.BACKEND``.
"""
from ._kernels import BACKEND as KERNEL_BACKEND
from .dforecast import (
    SampledDensity,
    ShiftOperator,
    build_shift_operator,
    density_moments,
    forecast_coeffs,
    project_density,
    reconstruct_density,
    rejection_sample,
)
from .embedding import DelayConfig, delay_embed, physical_coords
from .enkf import (
    CrossCovParameterization,
    NoiseEstimate,
    adaptive_estimate_Q,
    enkf_analysis,
    extract_theta_series,
    sigma_ensemble,
    spd_project,
    unscented_enkf,
)
from .geometry import DiffusionBasis, build_basis, estimate_peq
from .harness import (
    ExperimentConfig,
    SkillTable,
    emit_report,
    run_filter_experiment,
    run_forecast_experiment,
)
from .models import (
    IntegratorConfig,
    MsmModel,
    SdeSpec,
    TimeSeries,
    integrate,
    l96_theta_rhs,
    l96l63_rhs,
    lorenz96_rhs,
    msm_fit,
)
from .semiparametric import (
    ForecastResult,
    SemiState,
    run_filter,
    semiparametric_filter_step,
    semiparametric_forecast,
)

__version__ = "0.1.0"
