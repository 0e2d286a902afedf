"""Exact posterior grids, model averaging, and curvature diagnostics.

Grids are restricted to models with at most two parameters, where the
posterior can be tabulated and normalized by trapezoidal quadrature.  The
function-space density differs from the parameter-space density by the
``det^{-1/2}`` Gram factor before normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .models import LinkBasisModel
from .objectives import EIGENVALUE_RTOL, gram_mc
from .probability import Dataset, DiracSet, EvalDistribution, basis_second_moment


# ---------------------------------------------------------------------------
# Posterior grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Tabulation control for posterior grids.

    By default each axis spans ``mean +- span_stds * prior std`` with
    ``num_points`` nodes.  ``refine=True`` runs a coarse scan first and
    shrinks the axes to the region holding posterior mass (needed when the
    likelihood is much narrower than the prior).  Explicit ``ranges``
    override everything.
    """

    num_points: int = 401
    span_stds: float = 6.0
    refine: bool = False
    boundary_mass_threshold: float = 0.01
    ranges: tuple | None = None
    coarse_points: int = 513

    def __post_init__(self):
        if self.num_points < 3:
            raise DomainError("need at least 3 grid points per axis")


@dataclass(frozen=True)
class PosteriorGrid:
    """Normalized log densities tabulated on a rectangular grid.

    ``log_param_density`` and ``log_fs_density`` are normalized so that
    their exponentials integrate to one under trapezoidal quadrature over
    the grid.  ``boundary_warning`` flags runs where more than the allowed
    share of mass sits on the boundary (grid likely too small or coarse).
    """

    axes: tuple
    log_param_density: np.ndarray
    log_fs_density: np.ndarray
    boundary_warning: bool
    param_norm_residual: float
    fs_norm_residual: float
    normalized: bool = True

    @property
    def num_axes(self) -> int:
        return len(self.axes)

    def thetas(self) -> np.ndarray:
        """Grid nodes flattened to ``(G, P)`` in row-major mesh order."""
        if self.num_axes == 1:
            return self.axes[0][:, None]
        a0, a1 = self.axes
        t0, t1 = np.meshgrid(a0, a1, indexing="ij")
        return np.column_stack([t0.ravel(), t1.ravel()])

    def quadrature_weights(self) -> np.ndarray:
        ws = [_trapezoid_weights(a) for a in self.axes]
        if self.num_axes == 1:
            return ws[0]
        return np.outer(ws[0], ws[1])


def _trapezoid_weights(axis):
    w = np.zeros_like(axis)
    d = np.diff(axis)
    w[:-1] += d / 2.0
    w[1:] += d / 2.0
    return w


def _normalize_log_density(logp, weights):
    peak = logp.max()
    mass = float(np.sum(weights * np.exp(logp - peak)))
    log_norm = peak + np.log(mass)
    normalized = logp - log_norm
    residual = abs(float(np.sum(weights * np.exp(normalized))) - 1.0)
    return normalized, residual


def _boundary_mass(logp, weights):
    p = np.exp(logp) * weights
    if p.ndim == 1:
        return float(p[0] + p[-1])
    edge = float(p[0, :].sum() + p[-1, :].sum() + p[:, 0].sum() + p[:, -1].sum()
                 - p[0, 0] - p[0, -1] - p[-1, 0] - p[-1, -1])
    return edge


def _log_joint(model, data, prior, likelihood, thetas):
    outputs = model.evaluate_many(thetas, data.inputs)  # (G, N, K)
    if data.is_classification:
        y = np.asarray(data.targets).astype(int)
        shifted = outputs - outputs.max(axis=2, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=2)) + outputs.max(axis=2)
        picked = outputs[:, np.arange(y.size), y]
        loglik = np.sum(picked - lse, axis=1)
    else:
        targets = np.asarray(data.targets, dtype=float)
        z = (targets[None] - outputs) / likelihood.sigma
        loglik = -0.5 * np.sum(z**2, axis=(1, 2)) \
            - targets.size * (0.5 * np.log(2 * np.pi) + np.log(likelihood.sigma))
    z = (thetas - prior.mean) / prior.std
    logprior = -0.5 * np.sum(z**2, axis=1) \
        - thetas.shape[1] * (0.5 * np.log(2 * np.pi) + np.log(prior.std))
    return loglik + logprior


def _half_logdet_many(model, thetas, p_X, mc_samples=2048, seed=0):
    """Half log-determinants of the Gram at each grid node."""
    if isinstance(model, LinkBasisModel):
        psi = basis_second_moment(model, p_X)
        lam = np.linalg.eigvalsh(psi)
        if np.any(lam <= EIGENVALUE_RTOL * max(lam[-1], 0.0)):
            raise DomainError("basis second-moment matrix is singular; "
                              "the exact function-space density is undefined")
        logdet_psi = float(np.sum(np.log(lam)))
        return 0.5 * logdet_psi + np.sum(model.link.log_abs_deriv(thetas), axis=1)
    out = np.empty(thetas.shape[0])
    for i, theta in enumerate(thetas):
        if isinstance(p_X, DiracSet):
            stacked = model.jacobian(theta, p_X.points)
            n_eff = p_X.num_atoms
        else:
            _, stacked = gram_mc(model, theta, p_X, mc_samples, seed)
            n_eff = mc_samples
        s = np.linalg.svd(stacked, compute_uv=False)
        lam = np.zeros(model.param_count)
        lam[:s.size] = s**2 / n_eff
        out[i] = 0.5 * float(np.sum(np.log(lam)))
    return out


def _grid_axes(prior, n_params, spec: GridSpec):
    if spec.ranges is not None:
        if len(spec.ranges) != n_params:
            raise DimensionError("ranges must give (lo, hi) per parameter")
        return [np.linspace(lo, hi, spec.num_points) for lo, hi in spec.ranges]
    half = spec.span_stds * prior.std
    return [np.linspace(prior.mean - half, prior.mean + half, spec.num_points)
            for _ in range(n_params)]


def posterior_grid(model, data: Dataset, prior, likelihood, p_X: EvalDistribution,
                   grid_spec: GridSpec | None = None) -> PosteriorGrid:
    """Tabulate parameter- and function-space posterior densities.

    Requires ``model.param_count <= 2``.  Both densities are normalized on
    the grid; before normalization they differ exactly by the
    ``det^{-1/2}`` factor of the Gram under ``p_X``.
    """
    spec = grid_spec or GridSpec()
    n_params = model.param_count
    if n_params > 2:
        raise DomainError("posterior grids support at most two parameters")

    axes = _grid_axes(prior, n_params, spec)
    if spec.refine and spec.ranges is None:
        coarse = GridSpec(num_points=spec.coarse_points, span_stds=spec.span_stds,
                          ranges=None)
        coarse_axes = _grid_axes(prior, n_params, coarse)
        thetas = _mesh_thetas(coarse_axes)
        logp = _log_joint(model, data, prior, likelihood, thetas)
        shape = tuple(len(a) for a in coarse_axes)
        axes = _refined_axes(coarse_axes, logp.reshape(shape), spec.num_points)

    thetas = _mesh_thetas(axes)
    shape = tuple(len(a) for a in axes)
    log_joint = _log_joint(model, data, prior, likelihood, thetas)
    half_logdet = _half_logdet_many(model, thetas, p_X)
    weights = np.outer(_trapezoid_weights(axes[0]), _trapezoid_weights(axes[1])) \
        if n_params == 2 else _trapezoid_weights(axes[0])

    log_param = log_joint.reshape(shape)
    log_fs = (log_joint - half_logdet).reshape(shape)
    log_param, res_param = _normalize_log_density(log_param, weights)
    log_fs, res_fs = _normalize_log_density(log_fs, weights)
    warn = (_boundary_mass(log_param, weights) > spec.boundary_mass_threshold
            or _boundary_mass(log_fs, weights) > spec.boundary_mass_threshold)
    return PosteriorGrid(tuple(axes), log_param, log_fs, warn, res_param, res_fs)


def _mesh_thetas(axes):
    if len(axes) == 1:
        return axes[0][:, None]
    t0, t1 = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([t0.ravel(), t1.ravel()])


def _refined_axes(coarse_axes, logp, num_points, drop: float = 46.0, pad: int = 2):
    """Shrink axes to the region within ``drop`` log units of the peak."""
    keep = logp >= logp.max() - drop
    out = []
    for axis_idx, axis in enumerate(coarse_axes):
        mask = keep.any(axis=1 - axis_idx) if logp.ndim == 2 else keep
        idx = np.nonzero(mask)[0]
        lo = max(idx.min() - pad, 0)
        hi = min(idx.max() + pad, len(axis) - 1)
        out.append(np.linspace(axis[lo], axis[hi], num_points))
    return out


# ---------------------------------------------------------------------------
# Bayesian model average
# ---------------------------------------------------------------------------

def bma_function(grid: PosteriorGrid, model, xs, chunk: int = 1024) -> np.ndarray:
    """Posterior-mean function on ``xs`` by trapezoidal quadrature."""
    if not grid.normalized:
        raise DomainError("grid densities must be normalized")
    thetas = grid.thetas()
    mass = (np.exp(grid.log_param_density) * grid.quadrature_weights()).ravel()
    xs = model._check_inputs(xs)
    out = np.zeros((xs.shape[0], model.output_dim))
    for lo in range(0, thetas.shape[0], chunk):
        vals = model.evaluate_many(thetas[lo:lo + chunk], xs)
        out += np.tensordot(mass[lo:lo + chunk], vals, axes=(0, 0))
    return out


# ---------------------------------------------------------------------------
# Curvature and singularity diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlatnessReport:
    """Gauss-Newton spectrum at a parameter point (descending order)."""

    eigenvalues: np.ndarray
    mean_eigenvalue: float


def gn_hessian_eigs(model, theta, data: Dataset) -> FlatnessReport:
    """Eigenvalues of the Gauss-Newton matrix ``J^T J / N`` on the data."""
    if data.is_classification:
        raise DomainError("the Gauss-Newton flatness metric is for regression")
    J = model.jacobian(theta, data.inputs)
    gn = J.T @ J / max(data.n, 1)
    lam = np.linalg.eigvalsh(0.5 * (gn + gn.T))[::-1]
    return FlatnessReport(lam, float(lam.mean()))


@dataclass(frozen=True)
class SingularValueReport:
    min_singular_value: float
    gram_eigenvalue_sum: float


def min_singular_value(stacked_jacobian, num_points: int | None = None
                       ) -> SingularValueReport:
    """Smallest singular value of a stacked Jacobian, plus the eigenvalue
    sum of the associated Gram ``J^T J / num_points``.

    A stack with fewer rows than columns has a nontrivial null space, so
    the reported minimum is zero in that case.
    """
    J = np.asarray(stacked_jacobian, dtype=float)
    if J.ndim != 2:
        raise DimensionError("stacked Jacobian must be 2-D")
    n = num_points if num_points is not None else J.shape[0]
    s = np.linalg.svd(J, compute_uv=False)
    smin = 0.0 if J.shape[0] < J.shape[1] else float(s.min())
    return SingularValueReport(smin, float(np.sum(J**2) / n))


def gram_eigenvalue_sum(model, theta, p_X: EvalDistribution,
                        num_samples: int = 2048, seed: int = 0) -> float:
    """Trace of the Gram under ``p_X`` (exact for Dirac sets)."""
    if isinstance(p_X, DiracSet):
        J = model.jacobian(theta, p_X.points)
        return float(np.sum(J**2) / p_X.num_atoms)
    _, stacked = gram_mc(model, theta, p_X, num_samples, seed)
    return float(np.sum(stacked**2) / num_samples)
