"""Training objectives and the estimators behind them.

Four objectives are provided, all sharing a ``loss_and_grad`` surface the
optimizer consumes (loss = quantity minimized):

* :class:`PsMapObjective` -- log likelihood + log prior (maximized).
* :class:`FsMapExactObjective` -- adds ``-1/2 log det`` of the closed-form
  Gram ``sigma'(theta) sigma'(theta)^T * Phi`` available for link-basis
  models; the log-determinant is evaluated in log space so saturated links
  cannot underflow.
* :class:`FsMapMcObjective` -- adds ``-1/2 log det(G + eps I)`` where ``G``
  is a Monte Carlo (or exact finite-atom) Gram built from stacked
  Jacobians; the determinant is computed from singular values of the
  stacked Jacobian, never from the P-by-P product.
* :class:`LMapObjective` -- the Laplacian-regularized loss: standard
  regularized loss plus ``lam * R(theta; beta)`` where ``R`` estimates the
  Gram trace from parameter perturbations using forward passes only.

Gradients are exact for every objective (verified against central finite
differences in the test suite); stochastic objectives freeze their draws
per ``(seed, step)`` so the objective being differentiated is a fixed
deterministic function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, SingularGramError
from .models import DifferentiableModel, LinkBasisModel
from .probability import (
    Dataset,
    DiracSet,
    EvalDistribution,
    basis_second_moment,
    resolve_eval_dist,
)
from .rng import EVAL_DOMAIN, STEP_DOMAIN, stream

# singular values below this relative threshold are treated as exact zeros,
# so continuous parameter symmetries fall through to the pseudo-determinant
SINGULAR_RTOL = 1e-12
# numerical-rank tolerance for eigenvalues of an already-formed Gram matrix
EIGENVALUE_RTOL = 1e-14


# ---------------------------------------------------------------------------
# Gram matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GramMatrix:
    """Symmetric PSD second-moment matrix of model Jacobians."""

    entries: np.ndarray
    provenance: str                      # "exact" or "monte_carlo"
    num_samples: int | None = None
    seed: int | None = None

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DimensionError("Gram entries must form a square matrix")
        object.__setattr__(self, "entries", entries)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def gram_from_phi(model: LinkBasisModel, theta, phi) -> GramMatrix:
    """Closed-form Gram for link-basis models: ``sigma'_i sigma'_j Phi_ij``."""
    if not isinstance(model, LinkBasisModel):
        raise DomainError("closed-form Gram requires a link-basis model")
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (model.param_count, model.param_count):
        raise DimensionError(f"Phi must be ({model.param_count}, {model.param_count})")
    d = model.link_deriv(theta)
    return GramMatrix(np.outer(d, d) * phi, provenance="exact")


def gram_mc(model: DifferentiableModel, theta, p_X: EvalDistribution,
            num_samples: int, seed: int):
    """Monte Carlo Gram estimate plus the stacked Jacobian behind it.

    Returns ``(gram, stacked)`` where ``stacked`` is the raw
    ``(num_samples * K, P)`` Jacobian over the sampled evaluation points;
    the Gram is ``stacked^T stacked / num_samples``.
    """
    if num_samples < 1:
        raise DomainError("need at least one Monte Carlo sample")
    xs = p_X.sample(stream(seed, EVAL_DOMAIN, 1), num_samples)
    stacked = model.jacobian(theta, xs)
    entries = stacked.T @ stacked / num_samples
    gram = GramMatrix(0.5 * (entries + entries.T), provenance="monte_carlo",
                      num_samples=num_samples, seed=seed)
    return gram, stacked


# ---------------------------------------------------------------------------
# Jittered log-determinants
# ---------------------------------------------------------------------------

def logdet_jittered(operand, eps: float, num_samples: int = 1) -> float:
    """``log det(G + eps I)`` from a Gram matrix or a stacked Jacobian.

    For an ``(R, P)`` stacked Jacobian ``J`` the Gram is
    ``J^T J / num_samples`` and the result is computed from the singular
    values of ``J`` (zero-padded to P), never from the P-by-P product.
    Singular values below ``SINGULAR_RTOL`` relative to the largest are
    treated as exact zeros before jittering; with ``eps == 0`` any zero
    raises :class:`SingularGramError` reporting the null-direction count.
    """
    if eps < 0:
        raise DomainError("jitter must be nonnegative")
    if isinstance(operand, GramMatrix):
        lam = np.linalg.eigvalsh(0.5 * (operand.entries + operand.entries.T))
        lam = np.clip(lam, 0.0, None)
        if lam.size and lam[-1] > 0:
            lam[lam < EIGENVALUE_RTOL * lam[-1]] = 0.0
    else:
        stacked = np.asarray(operand, dtype=float)
        if stacked.ndim != 2:
            raise DimensionError("stacked Jacobian must be 2-D")
        if num_samples < 1:
            raise DomainError("num_samples must be positive")
        s = np.linalg.svd(stacked, compute_uv=False)
        if s.size and s[0] > 0:
            s[s < SINGULAR_RTOL * s[0]] = 0.0
        lam = np.zeros(stacked.shape[1])
        k = min(s.size, lam.size)
        lam[:k] = s[:k] ** 2 / num_samples
    null_count = int(np.sum(lam == 0.0))
    if eps == 0.0:
        if null_count:
            raise SingularGramError(null_count)
        return float(np.sum(np.log(lam)))
    return float(np.sum(np.log(lam + eps)))


# ---------------------------------------------------------------------------
# Shared likelihood plumbing
# ---------------------------------------------------------------------------

def _loglik_and_grad(model, theta, data: Dataset, likelihood):
    outputs = model.evaluate(theta, data.inputs)
    value = likelihood.log_density(data.targets, outputs)
    adjoint = likelihood.dlog_doutputs(data.targets, outputs)
    grad = model.vjp(theta, data.inputs, adjoint) if data.n else np.zeros(model.param_count)
    return value, grad


def _eval_points(p_X, num_samples, seed_path):
    """Evaluation points for a stochastic Gram/regularizer draw.

    Dirac sets with ``num_samples=None`` (or at least as many samples as
    atoms) are enumerated exactly; everything else is sampled i.i.d.
    """
    if isinstance(p_X, DiracSet) and (num_samples is None
                                      or num_samples >= p_X.num_atoms):
        return p_X.points
    if num_samples is None:
        raise DomainError("num_samples is required for non-atomic distributions")
    return p_X.sample(stream(*seed_path), int(num_samples))


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PsMapObjective:
    """Log parameter posterior up to a constant: likelihood plus prior."""

    prior: object
    likelihood: object

    kind = "ps"

    def value(self, model, theta, data, seed: int = 0, step: int = 0) -> float:
        from .probability import log_likelihood
        return log_likelihood(data, model, theta, self.likelihood) \
            + self.prior.log_density(theta)

    def objective_gradient(self, model, theta, data, seed: int = 0, step: int = 0):
        _, grad = _loglik_and_grad(model, theta, data, self.likelihood)
        return grad + self.prior.grad_log_density(theta)

    def loss_and_grad(self, model, theta, data, seed: int = 0, step: int = 0):
        ll, grad = _loglik_and_grad(model, theta, data, self.likelihood)
        value = ll + self.prior.log_density(theta)
        grad = grad + self.prior.grad_log_density(theta)
        return -value, -grad, float("nan")


@dataclass
class FsMapExactObjective:
    """Function-space MAP with the closed-form Gram of a link-basis model.

    ``phi`` is the basis second-moment matrix under ``p_X``; it is computed
    once on first use (and must be nonsingular: with a singular basis
    moment the objective is unbounded, use the jittered variant instead).
    """

    prior: object
    likelihood: object
    p_X: EvalDistribution | None = None
    phi: np.ndarray | None = None

    kind = "fs"

    def __post_init__(self):
        if self.phi is None and self.p_X is None:
            raise DomainError("provide either p_X or a precomputed phi")
        self._logdet_phi = None

    def _ensure_phi(self, model):
        if not isinstance(model, LinkBasisModel):
            raise DomainError("exact FS objective requires a link-basis model")
        if self.phi is None:
            self.phi = basis_second_moment(model, self.p_X)
        if self._logdet_phi is None:
            lam = np.linalg.eigvalsh(self.phi)
            null = int(np.sum(lam <= EIGENVALUE_RTOL * max(lam[-1], 0.0)))
            if null:
                raise SingularGramError(null)
            self._logdet_phi = float(np.sum(np.log(lam)))
        return self.phi

    def gram(self, model, theta) -> GramMatrix:
        return gram_from_phi(model, theta, self._ensure_phi(model))

    def half_logdet(self, model, theta) -> float:
        # log det(D Phi D) = log det Phi + 2 sum_i log|sigma'(theta_i)|,
        # evaluated in log space so saturation cannot underflow
        self._ensure_phi(model)
        return 0.5 * self._logdet_phi + float(np.sum(model.log_abs_link_deriv(theta)))

    def value(self, model, theta, data, seed: int = 0, step: int = 0) -> float:
        from .probability import log_likelihood
        base = log_likelihood(data, model, theta, self.likelihood) \
            + self.prior.log_density(theta)
        return base - self.half_logdet(model, theta)

    def objective_gradient(self, model, theta, data, seed: int = 0, step: int = 0):
        self._ensure_phi(model)
        _, grad = _loglik_and_grad(model, theta, data, self.likelihood)
        theta = np.asarray(theta, dtype=float)
        # d/dtheta_i [ -1/2 log det ] = -sigma''(theta_i) / sigma'(theta_i)
        return grad + self.prior.grad_log_density(theta) \
            - model.link.deriv_ratio(theta)

    def loss_and_grad(self, model, theta, data, seed: int = 0, step: int = 0):
        half_logdet = self.half_logdet(model, theta)
        ll, grad = _loglik_and_grad(model, theta, data, self.likelihood)
        value = ll + self.prior.log_density(theta) - half_logdet
        grad = grad + self.prior.grad_log_density(theta) \
            - model.link.deriv_ratio(np.asarray(theta, dtype=float))
        return -value, -grad, half_logdet


@dataclass(frozen=True)
class FsMapMcObjective:
    """Jittered function-space MAP over sampled evaluation points.

    With a Dirac evaluation distribution and ``num_samples=None`` the atom
    set is enumerated exactly, which realizes the finite-evaluation-point
    objective; otherwise ``num_samples`` points are redrawn per step from
    ``p_X`` (frozen per ``(seed, step)``).
    """

    prior: object
    likelihood: object
    p_X: EvalDistribution
    num_samples: int | None = None
    eps: float = 1e-6

    kind = "fs-mc"

    def __post_init__(self):
        if not self.eps > 0:
            raise DomainError("jitter eps must be positive for the MC objective")
        if self.num_samples is not None and self.num_samples < 1:
            raise DomainError("num_samples must be positive")

    def _points(self, seed, step):
        return _eval_points(self.p_X, self.num_samples,
                            (seed, STEP_DOMAIN, step, 1))

    def _logdet_pieces(self, model, theta, xs):
        # Work with the smaller of A A^T / A^T A; their nonzero spectra
        # agree and the resolvent weights below need no singular vectors
        # of the larger side.  eigh is markedly faster than svd here.
        n_eff = xs.shape[0]
        stacked = model.jacobian(theta, xs)
        scaled = stacked / np.sqrt(n_eff)
        rows, P = scaled.shape
        if rows <= P:
            small = scaled @ scaled.T
        else:
            small = scaled.T @ scaled
        lam, basis = np.linalg.eigh(0.5 * (small + small.T))
        lam = np.clip(lam, 0.0, None)
        if lam.size and lam[-1] > 0:
            lam[lam < EIGENVALUE_RTOL * lam[-1]] = 0.0
        logdet = float(np.sum(np.log(lam + self.eps))
                       + max(P - rows, 0) * np.log(self.eps))
        return logdet, (scaled, lam, basis, n_eff)

    def half_logdet(self, model, theta, seed: int = 0, step: int = 0) -> float:
        xs = self._points(seed, step)
        logdet, _ = self._logdet_pieces(model, theta, xs)
        return 0.5 * logdet

    def value(self, model, theta, data, seed: int = 0, step: int = 0) -> float:
        from .probability import log_likelihood
        base = log_likelihood(data, model, theta, self.likelihood) \
            + self.prior.log_density(theta)
        return base - self.half_logdet(model, theta, seed, step)

    def _logdet_gradient(self, model, theta, xs, eig_parts):
        # weights = (2/sqrt(n)) A (A^T A + eps I)^{-1}; by the push-through
        # identity this equals (A A^T + eps I)^{-1} A when rows <= P
        scaled, lam, basis, n_eff = eig_parts
        rows, P = scaled.shape
        inv = basis * (1.0 / (lam + self.eps))[None, :]
        if rows <= P:
            weights = inv @ (basis.T @ scaled)
        else:
            weights = (scaled @ inv) @ basis.T
        return model.jacobian_weighted_grad(theta, xs,
                                            (2.0 / np.sqrt(n_eff)) * weights)

    def objective_gradient(self, model, theta, data, seed: int = 0, step: int = 0):
        xs = self._points(seed, step)
        _, svd_parts = self._logdet_pieces(model, theta, xs)
        _, grad = _loglik_and_grad(model, theta, data, self.likelihood)
        dlogdet = self._logdet_gradient(model, theta, xs, svd_parts)
        return grad + self.prior.grad_log_density(theta) - 0.5 * dlogdet

    def loss_and_grad(self, model, theta, data, seed: int = 0, step: int = 0):
        xs = self._points(seed, step)
        logdet, svd_parts = self._logdet_pieces(model, theta, xs)
        ll, grad = _loglik_and_grad(model, theta, data, self.likelihood)
        value = ll + self.prior.log_density(theta) - 0.5 * logdet
        grad = grad + self.prior.grad_log_density(theta) \
            - 0.5 * self._logdet_gradient(model, theta, xs, svd_parts)
        return -value, -grad, 0.5 * logdet


@dataclass(frozen=True)
class LMapObjective:
    """Laplacian-regularized loss (minimized, per-datum normalized).

    ``loss = -(loglik + logprior)/N + lam * R(theta; beta)`` where
    ``R`` is the single-draw perturbation estimate of the Gram trace.
    ``lam = 1 / (2 eps N)`` recovers the jittered FS objective to first
    order; use :func:`lmap_weight` for the conversion.
    """

    prior: object
    likelihood: object
    p_X: EvalDistribution
    lam: float = 0.25
    beta: float = 1e-3
    num_eval_samples: int | None = None

    kind = "lmap"

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("lam must be nonnegative")
        if not self.beta > 0:
            raise DomainError("beta must be positive")
        if self.num_eval_samples is not None and self.num_eval_samples < 1:
            raise DomainError("num_eval_samples must be positive")

    def _draw(self, model, seed, step):
        psi = self.beta * stream(seed, STEP_DOMAIN, step, 2).standard_normal(
            model.param_count)
        xs = _eval_points(self.p_X, self.num_eval_samples,
                          (seed, STEP_DOMAIN, step, 3))
        return psi, xs

    def _reg_and_grad(self, model, theta, psi, xs):
        theta = np.asarray(theta, dtype=float)
        f0 = model.evaluate(theta, xs)
        f1 = model.evaluate(theta + psi, xs)
        delta = f0 - f1
        reg = float(np.mean(np.sum(delta**2, axis=1))) / self.beta**2
        scale = 2.0 / (self.beta**2 * xs.shape[0])
        grad = scale * (model.vjp(theta, xs, delta) - model.vjp(theta + psi, xs, delta))
        return reg, grad

    def regularizer(self, model, theta, seed: int = 0, step: int = 0) -> float:
        psi, xs = self._draw(model, seed, step)
        reg, _ = self._reg_and_grad(model, theta, psi, xs)
        return reg

    def value(self, model, theta, data, seed: int = 0, step: int = 0) -> float:
        loss, _, _ = self.loss_and_grad(model, theta, data, seed, step)
        return loss

    def objective_gradient(self, model, theta, data, seed: int = 0, step: int = 0):
        _, grad, _ = self.loss_and_grad(model, theta, data, seed, step)
        return grad

    def loss_and_grad(self, model, theta, data, seed: int = 0, step: int = 0):
        n = max(data.n, 1)
        ll, ll_grad = _loglik_and_grad(model, theta, data, self.likelihood)
        loss = -(ll + self.prior.log_density(theta)) / n
        grad = -(ll_grad + self.prior.grad_log_density(theta)) / n
        psi, xs = self._draw(model, seed, step)
        reg, reg_grad = self._reg_and_grad(model, theta, psi, xs)
        return loss + self.lam * reg, grad + self.lam * reg_grad, reg


ObjectiveSpec = PsMapObjective | FsMapExactObjective | FsMapMcObjective | LMapObjective


def lmap_weight(eps: float, n: int) -> float:
    """Regularization weight matching jitter ``eps``: ``1 / (2 eps N)``."""
    if not eps > 0 or n < 1:
        raise DomainError("need eps > 0 and n >= 1")
    return 1.0 / (2.0 * eps * n)


# ---------------------------------------------------------------------------
# Spec-level convenience wrappers
# ---------------------------------------------------------------------------

def ps_map_objective(model, theta, data, prior, likelihood) -> float:
    return PsMapObjective(prior, likelihood).value(model, theta, data)


def fs_map_objective(model, theta, data, spec, seed: int = 0, step: int = 0) -> float:
    if not isinstance(spec, (FsMapExactObjective, FsMapMcObjective)):
        raise DomainError("spec must be an exact or Monte Carlo FS objective")
    return spec.value(model, theta, data, seed, step)


def lmap_loss(model, theta, data, spec: LMapObjective, seed: int = 0, step: int = 0) -> float:
    return spec.value(model, theta, data, seed, step)


def lmap_regularizer(model, theta, p_X, beta: float, num_eval_samples: int | None,
                     seed: int, step: int = 0) -> float:
    """Single-draw trace estimate ``(1/beta^2) d(theta, theta + psi)``."""
    spec = LMapObjective(prior=None, likelihood=None, p_X=p_X, lam=0.0,
                         beta=beta, num_eval_samples=num_eval_samples)
    return spec.regularizer(model, theta, seed, step)


# ---------------------------------------------------------------------------
# Frame-averaged trace estimation (verification-grade)
# ---------------------------------------------------------------------------

def laplacian_trace_estimate(model, theta, p_X, beta: float, num_draws: int,
                             seed: int, phi=None, num_eval_samples: int = 4096) -> float:
    """Average the perturbation trace estimator over an orthonormal frame.

    Each draw evaluates the symmetric difference
    ``(d(theta, theta+psi) + d(theta, theta-psi)) / 2`` at ``psi`` of fixed
    radius ``beta * sqrt(P)`` along columns of a random orthogonal frame.
    The expectation matches the i.i.d. Gaussian estimator to O(beta^2)
    while the frame removes the quadratic-form sampling noise entirely
    once ``num_draws`` reaches P (the column sums telescope to the trace).

    ``phi`` short-circuits the function-space distance to the exact
    closed form ``delta^T Phi delta`` for link-basis models; Dirac
    evaluation distributions are enumerated, others sampled once.
    """
    if num_draws < 1:
        raise DomainError("need at least one draw")
    theta = np.asarray(theta, dtype=float)
    P = model.param_count
    rng = stream(seed, EVAL_DOMAIN, 4)

    if phi is not None:
        if not isinstance(model, LinkBasisModel):
            raise DomainError("phi-based distances require a link-basis model")
        phi = np.asarray(phi, dtype=float)
        pts = None
    else:
        pts = _eval_points(p_X, num_eval_samples, (seed, EVAL_DOMAIN, 5))

    radius = beta * np.sqrt(P)
    total = 0.0
    remaining = num_draws
    while remaining > 0:
        block = min(remaining, P)
        gauss = rng.standard_normal((P, block))
        q, _ = np.linalg.qr(gauss)
        psis = radius * q.T[:block]
        total += _symmetric_distance_sum(model, theta, psis, phi, pts)
        remaining -= block
    return total / (2.0 * num_draws * beta**2)


def _symmetric_distance_sum(model, theta, psis, phi, pts):
    if phi is not None:
        s0 = model.link.value(theta)
        d_plus = model.link.value(theta[None, :] + psis) - s0
        d_minus = model.link.value(theta[None, :] - psis) - s0
        return float(np.einsum("bp,pq,bq->", d_plus, phi, d_plus)
                     + np.einsum("bp,pq,bq->", d_minus, phi, d_minus))
    f0 = model.evaluate(theta, pts)
    total = 0.0
    for sign in (1.0, -1.0):
        f = model.evaluate_many(theta[None, :] + sign * psis, pts)
        total += float(np.sum(np.mean(np.sum((f - f0[None]) ** 2, axis=2), axis=1)))
    return total
