"""Priors, likelihoods, evaluation distributions and synthetic data.

Everything here is deterministic given a 64-bit seed; random draws go
through the Philox streams in :mod:`fsmap_lab.rng`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import DimensionError, DomainError
from .models import DifferentiableModel, FourierLinkModel, LinkBasisModel, Reparameterization
from .rng import DATA_DOMAIN, EVAL_DOMAIN, stream

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrior:
    """Isotropic Gaussian prior over all parameter coordinates."""

    std: float
    mean: float = 0.0

    def __post_init__(self):
        if not self.std > 0:
            raise DomainError("prior std must be positive")

    def log_density(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        z = (theta - self.mean) / self.std
        return float(-0.5 * np.sum(z**2) - theta.size * (0.5 * _LOG_2PI + np.log(self.std)))

    def grad_log_density(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return -(theta - self.mean) / self.std**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(size)


@dataclass(frozen=True)
class TransformedPrior:
    """Pushforward of a prior through a coordinate-wise reparameterization.

    Density in the new coordinates carries the change-of-variables factor:
    ``p'(t') = p(inv(t')) * |d inv / d t'|`` per coordinate.
    """

    base: GaussianPrior
    reparam: Reparameterization

    def log_density(self, theta_p) -> float:
        theta_p = np.asarray(theta_p, dtype=float)
        theta = self.reparam.inverse(theta_p)
        jac = self.reparam.inv_deriv(theta_p)
        return self.base.log_density(theta) + float(np.sum(np.log(np.abs(jac))))

    def grad_log_density(self, theta_p) -> np.ndarray:
        theta_p = np.asarray(theta_p, dtype=float)
        theta = self.reparam.inverse(theta_p)
        d1 = self.reparam.inv_deriv(theta_p)
        d2 = self.reparam.inv_second_deriv(theta_p)
        return self.base.grad_log_density(theta) * d1 + d2 / d1


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianNoise:
    """Additive Gaussian observation noise with fixed scale."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError("noise sigma must be positive")

    def log_density(self, targets, outputs) -> float:
        y = np.asarray(targets, dtype=float)
        f = np.asarray(outputs, dtype=float)
        if y.shape != f.shape:
            raise DimensionError(f"targets {y.shape} vs outputs {f.shape}")
        z = (y - f) / self.sigma
        return float(-0.5 * np.sum(z**2) - y.size * (0.5 * _LOG_2PI + np.log(self.sigma)))

    def dlog_doutputs(self, targets, outputs) -> np.ndarray:
        return (np.asarray(targets, dtype=float) - np.asarray(outputs, dtype=float)) \
            / self.sigma**2


@dataclass(frozen=True)
class CategoricalSoftmax:
    """Categorical observation model over softmax logits."""

    num_classes: int = 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise DomainError("need at least two classes")

    def _check(self, labels, logits):
        y = np.asarray(labels)
        f = np.asarray(logits, dtype=float)
        if f.ndim != 2 or f.shape[1] != self.num_classes:
            raise DimensionError(f"logits must be (N, {self.num_classes}), got {f.shape}")
        if y.shape != (f.shape[0],):
            raise DimensionError("labels must be a vector matching the logits rows")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DomainError("label out of range")
        return y.astype(int), f

    def log_density(self, labels, logits) -> float:
        y, f = self._check(labels, logits)
        shifted = f - f.max(axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=1)) + f.max(axis=1)
        return float(np.sum(f[np.arange(y.size), y] - lse))

    def dlog_doutputs(self, labels, logits) -> np.ndarray:
        y, f = self._check(labels, logits)
        shifted = np.exp(f - f.max(axis=1, keepdims=True))
        probs = shifted / shifted.sum(axis=1, keepdims=True)
        onehot = np.zeros_like(f)
        onehot[np.arange(y.size), y] = 1.0
        return onehot - probs


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Paired inputs/targets; targets are float arrays for regression and
    integer label vectors for classification."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        object.__setattr__(self, "inputs", inputs)
        targets = np.asarray(self.targets)
        object.__setattr__(self, "targets", targets)
        if inputs.ndim != 2:
            raise DimensionError("inputs must be a 2-D array")
        if targets.shape[0] != inputs.shape[0]:
            raise DimensionError("inputs and targets disagree on N")
        if not np.all(np.isfinite(inputs)):
            raise DomainError("inputs contain non-finite values")
        if np.issubdtype(targets.dtype, np.floating) and not np.all(np.isfinite(targets)):
            raise DomainError("targets contain non-finite values")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)


def log_prior(theta, prior) -> float:
    return prior.log_density(theta)


def log_likelihood(dataset: Dataset, model: DifferentiableModel, theta, likelihood) -> float:
    outputs = model.evaluate(theta, dataset.inputs)
    return likelihood.log_density(dataset.targets, outputs)


# ---------------------------------------------------------------------------
# Evaluation distributions
# ---------------------------------------------------------------------------

class EvalDistribution:
    """Distribution over model inputs defining function-space geometry."""

    input_dim: int

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformInterval(EvalDistribution):
    low: float = -1.0
    high: float = 1.0
    input_dim: int = 1

    def __post_init__(self):
        if not self.high > self.low:
            raise DomainError("need high > low")

    def sample(self, rng, size):
        return rng.uniform(self.low, self.high, size=(size, 1))

    def stratified_sample(self, rng, size):
        u = (np.arange(size) + rng.uniform(0.0, 1.0, size)) / size
        return (self.low + (self.high - self.low) * u)[:, None]


@dataclass(frozen=True)
class IsotropicGaussian(EvalDistribution):
    input_dim: int = 1

    def sample(self, rng, size):
        return rng.standard_normal((size, self.input_dim))

    def stratified_sample(self, rng, size):
        if self.input_dim != 1:
            raise DomainError("stratified sampling is one-dimensional only")
        u = (np.arange(size) + rng.uniform(0.0, 1.0, size)) / size
        return ndtri(u)[:, None]


class DiracSet(EvalDistribution):
    """Uniform mixture of point masses."""

    def __init__(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] == 0:
            raise DimensionError("atoms must form a non-empty (M, D) array")
        self.points = points
        self.input_dim = points.shape[1]

    def sample(self, rng, size):
        idx = rng.integers(0, self.points.shape[0], size=size)
        return self.points[idx]

    @property
    def num_atoms(self) -> int:
        return self.points.shape[0]


class EmpiricalTrain(EvalDistribution):
    """Marker distribution standing for the training inputs; resolve
    against a dataset before sampling."""

    input_dim = None

    def sample(self, rng, size):
        raise DomainError("EmpiricalTrain must be resolved against a dataset first")

    def resolve(self, dataset: Dataset) -> DiracSet:
        return DiracSet(dataset.inputs)


def resolve_eval_dist(dist: EvalDistribution, dataset: Dataset | None) -> EvalDistribution:
    if isinstance(dist, EmpiricalTrain):
        if dataset is None:
            raise DomainError("EmpiricalTrain needs a dataset to resolve against")
        return dist.resolve(dataset)
    return dist


def eval_dist_sample(dist: EvalDistribution, seed: int, size: int) -> np.ndarray:
    """Draw ``size`` i.i.d. evaluation points, deterministic given seed."""
    if size < 1:
        raise DomainError("need at least one sample")
    return dist.sample(stream(seed, EVAL_DOMAIN), size)


# ---------------------------------------------------------------------------
# Synthetic data generators
# ---------------------------------------------------------------------------

def sample_fourier_dataset(seed: int, n: int, alpha: float = 10.0,
                           sigma_star: float = 0.1, num_frequencies: int = 100,
                           link: str = "tanh"):
    """Draw the linked-Fourier regression benchmark.

    Inputs are Uniform(-1, 1), ground-truth parameters are N(0, alpha^2),
    targets add Gaussian noise of scale ``sigma_star``.  Returns
    ``(dataset, theta_true, model)``.
    """
    if n < 1:
        raise DomainError("need n >= 1")
    if not alpha > 0:
        raise DomainError("alpha must be positive")
    if sigma_star < 0:
        raise DomainError("sigma_star must be nonnegative")
    model = FourierLinkModel(num_frequencies=num_frequencies, link=link)
    theta_true = alpha * stream(seed, DATA_DOMAIN, 0).standard_normal(model.param_count)
    xs = stream(seed, DATA_DOMAIN, 1).uniform(-1.0, 1.0, size=(n, 1))
    clean = model.evaluate(theta_true, xs)
    noise = sigma_star * stream(seed, DATA_DOMAIN, 2).standard_normal(clean.shape)
    return Dataset(xs, clean + noise), theta_true, model


def make_two_moons(seed: int, n: int, noise: float = 0.2) -> Dataset:
    """Two interleaved half-circles with Gaussian jitter, n/2 points each.

    Class 0 lies on the upper unit half-circle at the origin; class 1 on
    the lower half-circle shifted to pass through (0, 0) and (2, 0) with
    apex (1, -0.5) before jitter.  Shuffled deterministically by seed.
    """
    if n % 2 != 0:
        raise DomainError("n must be even so classes balance")
    if noise < 0:
        raise DomainError("noise must be nonnegative")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    points = np.vstack([upper, lower])
    labels = np.concatenate([np.zeros(half, dtype=int), np.ones(half, dtype=int)])
    rng = stream(seed, DATA_DOMAIN, 3)
    points = points + noise * rng.standard_normal(points.shape)
    order = rng.permutation(n)
    return Dataset(points[order], labels[order])


# ---------------------------------------------------------------------------
# Basis second moments
# ---------------------------------------------------------------------------

def phi_matrix(frequencies, p_X: EvalDistribution, num_samples: int = 10_000,
               seed: int = 0) -> np.ndarray:
    """Second-moment matrix of the Fourier basis under ``p_X``.

    Exact for ``UniformInterval(-1, 1)`` (and any symmetric interval, via
    the sinc integrals) and for :class:`DiracSet` (finite average over the
    atoms); otherwise a stratified Monte Carlo average over ``num_samples``
    draws.  The result is symmetric positive semidefinite.
    """
    model = FourierLinkModel(link="identity", frequencies=np.asarray(frequencies, dtype=float))
    return basis_second_moment(model, p_X, num_samples=num_samples, seed=seed)


def basis_second_moment(model: LinkBasisModel, p_X: EvalDistribution,
                        num_samples: int = 10_000, seed: int = 0) -> np.ndarray:
    """E_{p_X}[phi_i(X) phi_j(X)] for the model's basis."""
    if isinstance(p_X, DiracSet):
        B = model.basis(p_X.points)
        return _symmetrize(B.T @ B / p_X.num_atoms)
    if isinstance(model, FourierLinkModel) and isinstance(p_X, UniformInterval) \
            and p_X.low == -p_X.high:
        return _fourier_symmetric_uniform_moment(model.frequencies, p_X.high)
    if not hasattr(p_X, "stratified_sample"):
        raise DomainError(f"no sampler for evaluation distribution {type(p_X).__name__}")
    xs = p_X.stratified_sample(stream(seed, EVAL_DOMAIN, 7), num_samples)
    B = model.basis(xs)
    return _symmetrize(B.T @ B / num_samples)


def _symmetrize(m):
    return 0.5 * (m + m.T)


def _fourier_symmetric_uniform_moment(freqs, c):
    # E[cos(ax)cos(bx)] = (sinc(c(a-b)) + sinc(c(a+b))) / 2 over U(-c, c);
    # sin/sin flips the sign of the second term, cos/sin vanishes by parity.
    a = freqs[:, None]
    b = freqs[None, :]
    sinc = lambda t: np.sinc(t / np.pi)
    minus = sinc(c * (a - b))
    plus = sinc(c * (a + b))
    cc = 0.5 * (minus + plus)
    ss = 0.5 * (minus - plus)
    F = freqs.size
    out = np.zeros((2 * F, 2 * F))
    out[:F, :F] = cc
    out[F:, F:] = ss
    return out


# ---------------------------------------------------------------------------
# Dataset serialization
# ---------------------------------------------------------------------------

def dataset_to_csv(dataset: Dataset) -> str:
    """Render a dataset in the canonical CSV layout (header included)."""
    d = dataset.inputs.shape[1]
    if dataset.is_classification:
        header = [f"x_{i}" for i in range(d)] + ["label"]
        rows = [
            [repr(float(v)) for v in x] + [str(int(y))]
            for x, y in zip(dataset.inputs, dataset.targets)
        ]
    else:
        targets = np.atleast_2d(dataset.targets)
        if targets.shape[0] != dataset.n:
            targets = targets.T
        k = targets.shape[1]
        header = [f"x_{i}" for i in range(d)] + [f"y_{j}" for j in range(k)]
        rows = [
            [repr(float(v)) for v in x] + [repr(float(v)) for v in y]
            for x, y in zip(dataset.inputs, targets)
        ]
    lines = [",".join(header)] + [",".join(r) for r in rows]
    return "\n".join(lines) + "\n"


def dataset_from_csv(text: str) -> Dataset:
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    xs_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
    body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    inputs = body[:, xs_cols]
    if header[-1] == "label":
        return Dataset(inputs, body[:, -1].astype(int))
    y_cols = [i for i, h in enumerate(header) if h.startswith("y_")]
    targets = body[:, y_cols]
    return Dataset(inputs, targets)
