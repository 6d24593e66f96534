"""Diffusion forecast: densities on training points, coefficients, shift operator.

A density is represented by its values on the N training points. Its
basis coefficients are Monte-Carlo inner products

    c_j = (1/N) sum_i p(th_i) phi_j(th_i) / p_eq(th_i),

the one-step forecast is the linear map c -> A c with

    A_lj = (1/(N-1)) sum_i phi_j(th_i) phi_l(th_{i+1}),

and reconstruction is p(th_i) = max(sum_j c_j phi_j(th_i), 0) * p_eq(th_i)
renormalized by Z = (1/N) sum_i p(th_i)/p_eq(th_i). Sampling uses the
standard rejection method with p_eq (the sampling measure of the training
set) as the proposal.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DensityCollapseError,
    InsufficientDataError,
    PathologicalDensityError,
)
from .geometry import DiffusionBasis

COLLAPSE_TOL = 1e-12
MIN_ACCEPTANCE = 1e-4


@dataclass
class SampledDensity:
    """Nonnegative density values on the training points of a basis."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    @classmethod
    def equilibrium(cls, basis: DiffusionBasis) -> "SampledDensity":
        return cls(values=basis.peq.copy(), normalized=True)

    @classmethod
    def from_values(cls, values, basis: DiffusionBasis) -> "SampledDensity":
        """Clip negatives and normalize so (1/N) sum p/p_eq = 1."""
        vals = np.maximum(np.asarray(values, dtype=float), 0.0)
        z = normalization(vals, basis)
        if z < COLLAPSE_TOL:
            raise DensityCollapseError("density vanishes on the training set")
        return cls(values=vals / z, normalized=True)

    @classmethod
    def gaussian(cls, basis: DiffusionBasis, center, cov) -> "SampledDensity":
        """Gaussian bump evaluated on the leading coordinates of the points.

        ``center`` may be lower-dimensional than the (possibly delay
        embedded) training points; only its coordinates are compared.
        """
        center = np.atleast_1d(np.asarray(center, dtype=float))
        m = center.shape[0]
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        diff = basis.points[:, :m] - center
        sol = np.linalg.solve(cov, diff.T)
        logp = -0.5 * np.einsum("ij,ji->i", diff, sol)
        return cls.from_values(np.exp(logp - logp.max()), basis)


@dataclass
class ShiftOperator:
    """M x M one-step forecast map for basis coefficients."""

    matrix: np.ndarray
    tau: Optional[float]

    @property
    def n_modes(self) -> int:
        return self.matrix.shape[0]


def normalization(values: np.ndarray, basis: DiffusionBasis) -> float:
    """Monte-Carlo mass Z = (1/N) sum_i p(th_i)/p_eq(th_i)."""
    return float(np.mean(np.asarray(values, dtype=float) / basis.peq))


def project_density(p: SampledDensity, basis: DiffusionBasis) -> np.ndarray:
    """Coefficients c_j = (1/N) sum_i p(th_i) phi_j(th_i) / p_eq(th_i)."""
    if p.values.shape[0] != basis.n_points:
        raise ValueError("density values do not match the training set size")
    if not p.normalized:
        raise ValueError("project_density expects a normalized density")
    return (basis.phi.T @ (p.values / basis.peq)) / basis.n_points


def build_shift_operator(
    basis: DiffusionBasis, segment_lengths: Optional[Sequence[int]] = None
) -> ShiftOperator:
    """Estimate the shift operator from the temporal order of the training set.

    With ``segment_lengths`` the training set is a concatenation of
    independent trajectory segments and pairs spanning a boundary are
    excluded.
    """
    if not basis.temporal:
        raise ValueError(
            "shift operator needs temporally ordered training data; "
            "this basis was built from an unordered point set"
        )
    phi = basis.phi
    src = basis.source_index
    valid = np.diff(src) == 1  # rows adjacent in the source series
    if segment_lengths is not None:
        n_src = int(np.max(src)) + 1
        if sum(segment_lengths) < n_src:
            raise ValueError("segment lengths do not cover the training series")
        seg_id = np.repeat(np.arange(len(segment_lengths)), segment_lengths)
        valid &= seg_id[src[:-1]] == seg_id[src[1:]]
    prev = np.flatnonzero(valid)
    if prev.size < 1:
        raise InsufficientDataError("shift operator needs at least two temporal pairs")
    A = (phi[prev + 1].T @ phi[prev]) / prev.size
    return ShiftOperator(matrix=A, tau=basis.tau)


def forecast_coeffs(c: np.ndarray, op: ShiftOperator, steps: int) -> np.ndarray:
    """Iterate c -> A c for ``steps`` steps (matvec order, exactly associative)."""
    if steps < 0:
        raise ValueError("step count must be nonnegative")
    out = np.asarray(c, dtype=float).copy()
    for _ in range(steps):
        out = op.matrix @ out
    return out


def reconstruct_density(c: np.ndarray, basis: DiffusionBasis) -> SampledDensity:
    """Reconstruct max(sum_j c_j phi_j, 0) * p_eq, renormalized to unit mass."""
    ratio = np.maximum(basis.phi @ np.asarray(c, dtype=float), 0.0)
    z = float(ratio.mean())
    if z < COLLAPSE_TOL:
        raise DensityCollapseError("reconstructed density vanished on the training set")
    return SampledDensity(values=(ratio / z) * basis.peq, normalized=True)


@dataclass
class SampleResult:
    points: np.ndarray
    indices: np.ndarray
    n_proposals: int
    bound: float

    @property
    def acceptance_rate(self) -> float:
        return len(self.indices) / max(self.n_proposals, 1)


def rejection_sample(
    p: SampledDensity, basis: DiffusionBasis, n_samples: int,
    rng: np.random.Generator,
) -> SampleResult:
    """Draw training points distributed according to ``p``.

    Proposals are uniform training indices (samples of p_eq); a proposal m
    is accepted when xi < p(th_m) / (P p_eq(th_m)) with the optimal bound
    P = max_i p(th_i)/p_eq(th_i).
    """
    if not p.normalized:
        raise ValueError("rejection sampling expects a normalized density")
    ratio = p.values / basis.peq
    bound = float(ratio.max())
    if bound <= 0:
        raise DensityCollapseError("density vanishes on the training set")
    accept_prob = ratio / bound
    if 1.0 / bound < MIN_ACCEPTANCE:
        raise PathologicalDensityError(
            f"acceptance probability 1/P = {1.0 / bound:.2e} below {MIN_ACCEPTANCE}"
        )
    out = np.empty(n_samples, dtype=np.intp)
    got = 0
    n_prop = 0
    n = basis.n_points
    while got < n_samples:
        batch = int(min(4 * (n_samples - got) * bound + 64, 4e6))
        cand = rng.integers(0, n, size=batch)
        xi = rng.random(batch)
        good = cand[xi < accept_prob[cand]]
        take = min(len(good), n_samples - got)
        out[got: got + take] = good[:take]
        got += take
        n_prop += batch if take == len(good) else np.searchsorted(
            np.cumsum(xi < accept_prob[cand]), take) + 1
    return SampleResult(points=basis.points[out], indices=out,
                        n_proposals=int(n_prop), bound=bound)


def density_moments(p: SampledDensity, basis: DiffusionBasis):
    """Importance-weighted mean and covariance of a density on the points.

    Uses weights w_i = p(th_i)/(N p_eq(th_i)), the same Monte-Carlo
    convention as the projection integrals.
    """
    if not p.normalized:
        raise ValueError("density_moments expects a normalized density")
    w = p.values / (basis.n_points * basis.peq)
    total = w.sum()
    if total < COLLAPSE_TOL:
        raise DensityCollapseError("density vanishes on the training set")
    w = w / total
    mean = w @ basis.points
    centered = basis.points - mean
    cov = (centered * w[:, None]).T @ centered
    return mean, cov
