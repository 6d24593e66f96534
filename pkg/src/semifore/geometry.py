"""Data-driven basis and equilibrium density from variable-bandwidth diffusion maps.

The basis {phi_j} consists of eigenfunctions of the generator of the
stochastic gradient flow in the potential U = -log p_eq, estimated from
training samples of the parameter dynamics. Construction:

1. bandwidth field rho_i = RMS distance to the ``bw_neighbors`` nearest
   neighbors (adapts to sparsely sampled regions);
2. sparse kernel K_ij = exp(-|th_i - th_j|^2 / (4 eps rho_i rho_j)) on the
   ``knn`` nearest-neighbor graph, symmetrized by max;
3. global scale eps from the log-log slope of the kernel sum (the slope at
   the maximum also estimates the intrinsic dimension; the operator uses
   half the argmax scale, which measurably sharpens the eigenfunctions);
4. sampling-bias correction K_ij / (rho_i rho_j), then the local-scale
   weighted eigenproblem (K~ - D) v = lambda (D rho^2) v, whose solutions
   approximate the gradient-flow eigenfunctions orthonormal in L^2(p_eq);
5. phi_0 is fixed to the exact constant and the remaining modes are
   symmetrically re-orthonormalized in the sampled inner product, so the
   discrete Gram matrix (1/N) Phi^T Phi is the identity by construction.

p_eq is estimated separately with a sqrt-law adaptive kernel density
estimate normalized by the intrinsic dimension, so it remains consistent
for data on curved low-dimensional sets embedded in higher ambient space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError, InsufficientDataError, NumericError
from .models import TimeSeries

DEFAULT_MODES = 100
DEFAULT_KNN = 128
DEFAULT_BW_NEIGHBORS = 32
KDE_BANDWIDTH_MULT = 1.5
DENSITY_FLOOR = 0.01      # trim points below this fraction of the peak density
MAX_TRIM_FRACTION = 0.05  # never trim more than this share of the data


@dataclass
class DiffusionBasis:
    """Basis values, equilibrium density and diagnostics on the training set."""

    points: np.ndarray          # (N, d) training points, temporal order if temporal
    phi: np.ndarray             # (N, M) basis values, column 0 is the constant 1
    peq: np.ndarray             # (N,) equilibrium density estimate, > 0
    eigvals: np.ndarray         # (M,) generator rates, nonincreasing from ~0
    tau: Optional[float]        # sample interval of the training series
    temporal: bool = True       # rows are consecutive samples of one trajectory
    source_index: Optional[np.ndarray] = None  # row indices into the source series
    rho: Optional[np.ndarray] = None
    eps: Optional[float] = None
    intrinsic_dim: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source_index is None:
            self.source_index = np.arange(self.points.shape[0])

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_modes(self) -> int:
        return self.phi.shape[1]

    def save(self, path) -> None:
        meta = dict(self.meta)
        meta.update(
            temporal=bool(self.temporal),
            eps=None if self.eps is None else float(self.eps),
            intrinsic_dim=None if self.intrinsic_dim is None else int(self.intrinsic_dim),
        )
        np.savez_compressed(
            path,
            points=self.points,
            phi=self.phi,
            peq=self.peq,
            eigvals=self.eigvals,
            tau=np.float64(np.nan if self.tau is None else self.tau),
            source_index=self.source_index,
            rho=self.rho if self.rho is not None else np.zeros(0),
            meta=np.bytes_(json.dumps(meta).encode()),
        )

    @classmethod
    def load(cls, path) -> "DiffusionBasis":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            tau = float(z["tau"])
            rho = z["rho"]
            return cls(
                points=z["points"], phi=z["phi"], peq=z["peq"], eigvals=z["eigvals"],
                tau=None if np.isnan(tau) else tau,
                temporal=bool(meta.pop("temporal", True)),
                source_index=z["source_index"],
                rho=rho if rho.size else None,
                eps=meta.pop("eps", None),
                intrinsic_dim=meta.pop("intrinsic_dim", None),
                meta=meta,
            )


def _as_points(data: Union[TimeSeries, np.ndarray]):
    if isinstance(data, TimeSeries):
        return np.ascontiguousarray(data.values), data.dt, True
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype=float)))
    if pts.shape[0] == 1 and pts.shape[1] > 1:
        pts = pts.T  # a flat vector is a scalar series
    return pts, None, False


def knn_bandwidth(points: np.ndarray, k: int = DEFAULT_BW_NEIGHBORS,
                  knn: int = DEFAULT_KNN):
    """kNN distances plus the RMS-distance bandwidth field rho."""
    n = points.shape[0]
    k_query = min(knn + 1, n)
    dist, idx = cKDTree(points).query(points, k=k_query)
    dist, idx = dist[:, 1:], idx[:, 1:]  # drop self matches
    if not np.any(dist > 0):
        raise DegenerateGeometryError("training points have no pairwise spread")
    rho = np.sqrt(np.mean(dist[:, : min(k, dist.shape[1])] ** 2, axis=1))
    floor = dist[dist > 0].min()
    rho = np.maximum(rho, floor * 1e-3)
    return dist, idx, rho


def tune_kernel_scale(scaled_sq_dists: np.ndarray, n_points: int):
    """Pick the kernel scale from the log-log slope of T(eps) = sum_ij K_ij.

    Self-pairs keep T -> N as eps -> 0 so the slope vanishes at both ends;
    the maximum slope sits in the power-law regime where it equals half the
    intrinsic dimension. Returns (eps at argmax, dhat, grid, T values).
    """
    eps_grid = 2.0 ** np.arange(-20.0, 10.5, 0.5)
    T = np.array([n_points + np.exp(-scaled_sq_dists / (4.0 * e)).sum() for e in eps_grid])
    slope = np.gradient(np.log(T), np.log(eps_grid))
    i_best = int(np.argmax(slope))
    dhat = int(np.clip(round(2.0 * float(slope[i_best])), 1, None))
    return float(eps_grid[i_best]), dhat, eps_grid, T


def pairwise_kernel(points: np.ndarray, rho: np.ndarray, eps_scale: float,
                    knn: int = DEFAULT_KNN) -> sp.csr_matrix:
    """Variable-bandwidth Gaussian kernel on the kNN graph, symmetrized by max.

    K_ij = exp(-|th_i - th_j|^2 / (4 eps rho_i rho_j)) for j among the knn
    nearest neighbors of i (self-pairs K_ii = 1 included).
    """
    if eps_scale <= 0:
        raise ValueError("kernel scale must be positive")
    if np.any(rho <= 0):
        raise ValueError("bandwidth field must be positive")
    n = points.shape[0]
    dist, idx, _ = knn_bandwidth(points, k=DEFAULT_BW_NEIGHBORS, knn=knn)
    rows = np.repeat(np.arange(n), idx.shape[1])
    cols = idx.ravel()
    vals = np.exp(-(dist.ravel() ** 2) / (4.0 * eps_scale * rho[rows] * rho[cols]))
    K = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    K = K.maximum(K.T)
    return (K + sp.identity(n, format="csr")).tocsr()


def estimate_peq(data: Union[TimeSeries, np.ndarray],
                 intrinsic_dim: Optional[int] = None,
                 bandwidth_mult: float = KDE_BANDWIDTH_MULT) -> np.ndarray:
    """Adaptive (sqrt-law) KDE of the sampling density on the training points.

    A fixed-bandwidth pilot sets per-sample bandwidths h_j proportional to
    q0(th_j)^(-1/2), which removes the leading-order bias; normalization
    uses the intrinsic dimension so densities on embedded low-dimensional
    sets are taken with respect to the intrinsic volume.
    """
    pts, _, _ = _as_points(data)
    n, _ = pts.shape
    if n < 100:
        raise InsufficientDataError("density estimation needs at least 100 points")
    if intrinsic_dim is None:
        dist, idx, rho = knn_bandwidth(pts)
        rows = np.repeat(np.arange(n), idx.shape[1])
        scaled = (dist.ravel() ** 2) / (rho[rows] * rho[idx.ravel()])
        _, intrinsic_dim, _, _ = tune_kernel_scale(scaled, n)
    d = int(intrinsic_dim)
    sig = np.sqrt(np.mean(np.var(pts, axis=0)))
    if sig == 0:
        raise DegenerateGeometryError("training points have no pairwise spread")
    h0 = bandwidth_mult * sig * n ** (-1.0 / (4 + d))

    def _kde(h_per_sample):
        out = np.empty(n)
        chunk = max(1, int(2.0e7 // n))
        norm = (2.0 * np.pi) ** (d / 2.0) * h_per_sample**d
        for a in range(0, n, chunk):
            d2 = ((pts[a:a + chunk, None, :] - pts[None, :, :]) ** 2).sum(-1)
            out[a:a + chunk] = (np.exp(-d2 / (2.0 * h_per_sample**2)) / norm).sum(1)
        return out / n

    pilot = _kde(np.full(n, h0))
    lam = np.sqrt(np.exp(np.mean(np.log(pilot))) / pilot)
    return _kde(h0 * lam)


def quadrature_weights(density_values: np.ndarray, peq: np.ndarray) -> np.ndarray:
    """Monte-Carlo quadrature weights w_i = p(th_i) / (N p_eq(th_i)).

    For a normalized density the weights sum to one; for p = p_eq they are
    exactly 1/N each.
    """
    p = np.asarray(density_values, dtype=float)
    return p / (len(p) * np.asarray(peq, dtype=float))


def _scaled_knn(pts, bw_neighbors, knn):
    n = pts.shape[0]
    dist, idx, rho = knn_bandwidth(pts, k=bw_neighbors, knn=knn)
    rows = np.repeat(np.arange(n), idx.shape[1])
    cols = idx.ravel()
    scaled = (dist.ravel() ** 2) / (rho[rows] * rho[cols])
    return rows, cols, scaled, rho


def build_basis(
    data: Union[TimeSeries, np.ndarray],
    n_modes: int = DEFAULT_MODES,
    knn: int = DEFAULT_KNN,
    bw_neighbors: int = DEFAULT_BW_NEIGHBORS,
    tau: Optional[float] = None,
    temporal: Optional[bool] = None,
    density_floor: float = DENSITY_FLOOR,
) -> DiffusionBasis:
    """Estimate the gradient-flow eigenbasis and p_eq from training data.

    ``data`` is a TimeSeries (temporal order preserved, enables the shift
    operator) or a bare point array. Points whose pilot density falls below
    ``density_floor`` times the peak are dropped before the operator build:
    isolated outliers otherwise carry spurious localized eigenmodes that
    interleave the physical spectrum. Dropped rows are recorded via
    ``source_index``. Returns a :class:`DiffusionBasis` with phi normalized
    so (1/N) Phi^T Phi = I exactly and phi_0 = 1.
    """
    pts_all, series_tau, is_series = _as_points(data)
    n_all = pts_all.shape[0]
    if tau is None:
        tau = series_tau
    if temporal is None:
        temporal = is_series
    if n_all < 100:
        raise InsufficientDataError("basis construction needs at least 100 points")
    if not n_modes < n_all / 2:
        raise ValueError("number of modes must be below half the training size")

    # pilot pass: intrinsic dimension and density for the outlier trim
    _, _, scaled0, _ = _scaled_knn(pts_all, bw_neighbors, knn)
    _, dhat0, _, _ = tune_kernel_scale(scaled0, n_all)
    pilot = estimate_peq(pts_all, intrinsic_dim=dhat0)
    if density_floor > 0:
        min_keep = pilot >= np.quantile(pilot, MAX_TRIM_FRACTION)
        keep = (pilot >= density_floor * pilot.max()) | min_keep
    else:
        keep = np.ones(n_all, dtype=bool)
    source_index = np.flatnonzero(keep)
    pts = pts_all[keep]
    n = pts.shape[0]

    rows, cols, scaled, rho = _scaled_knn(pts, bw_neighbors, knn)
    eps_star, dhat, eps_grid, T = tune_kernel_scale(scaled, n)
    eps = 0.5 * eps_star  # the argmax scale oversmooths; half sharpens the modes

    peq = estimate_peq(pts, intrinsic_dim=dhat) if np.any(~keep) else pilot[keep]

    # kernel without self-loops: a weakly connected outlier with a self-loop
    # row turns into a spurious near-null mode
    K = sp.csr_matrix((np.exp(-scaled / (4.0 * eps)), (rows, cols)), shape=(n, n))
    K = K.maximum(K.T)

    # sampling-bias correction and local-scale weighted symmetric eigenproblem
    Rinv = sp.diags(1.0 / rho)
    Kt = (Rinv @ K @ Rinv).tocsr()
    D = np.asarray(Kt.sum(axis=1)).ravel()
    W = sp.diags(1.0 / (np.sqrt(D) * rho))
    S = ((W @ Kt @ W - sp.diags(1.0 / rho**2)) / eps).tocsc()
    S = (S + S.T) * 0.5

    span = float(np.abs(S.diagonal()).max())
    try:
        vals, vecs = spl.eigsh(S, k=n_modes, sigma=max(span * 1e-7, 1e-12),
                               which="LM", v0=np.ones(n))
    except Exception as exc:  # ARPACK failures carry no useful type info
        raise NumericError(
            f"eigensolver failed (N={n}, modes={n_modes}, eps={eps:.3g}, "
            f"dhat={dhat}): {exc}"
        ) from exc
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]

    phi = vecs / (np.sqrt(D) * rho)[:, None]
    phi[:, 0] = 1.0
    if n_modes > 1:
        # keep phi_0 exactly constant; center and symmetrically orthonormalize
        # the rest so the sampled Gram matrix is the identity
        B = phi[:, 1:] - phi[:, 1:].mean(axis=0, keepdims=True)
        G = (B.T @ B) / n
        gev, gvec = np.linalg.eigh(G)
        if gev.min() <= 0:
            raise NumericError("basis modes are numerically dependent")
        phi[:, 1:] = B @ (gvec @ np.diag(gev**-0.5) @ gvec.T)

    return DiffusionBasis(
        points=pts, phi=np.ascontiguousarray(phi), peq=peq, eigvals=vals,
        tau=tau, temporal=temporal, source_index=source_index,
        rho=rho, eps=eps, intrinsic_dim=dhat,
        meta={"knn": knn, "bw_neighbors": bw_neighbors, "eps_argmax": eps_star,
              "n_modes": n_modes, "n_trimmed": int(n_all - n)},
    )
