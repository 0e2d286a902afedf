"""Differentiable models with exact analytic Jacobians.

Three model families are provided:

* :class:`FourierLinkModel` -- a link-basis model over Fourier features
  ``f(x) = sum_i link(theta_i) * phi_i(x)`` with ``phi`` the cosine/sine
  basis at frequencies ``k_i = i*pi``.
* :class:`GaussianBumpModel` -- the two-bump mixture with heights
  ``exp(theta)``, a link-basis model with an exponential link.
* :class:`MlpModel` -- a dense multilayer perceptron with hand-rolled
  forward, reverse (backprop) and second-order passes.

Every model exposes the same surface: ``evaluate``, ``jacobian`` (stacked
``(M*K, P)``), ``vjp`` (reverse-mode gradient of a scalar loss through the
outputs), ``jacobian_weighted_grad`` (gradient of a frozen-weight
contraction of the Jacobian, the second-order quantity needed by
log-determinant gradients) and ``evaluate_many`` (vectorized over a batch
of parameter vectors).  All operations are pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError
from .rng import INIT_DOMAIN, stream


# ---------------------------------------------------------------------------
# Scalar links
# ---------------------------------------------------------------------------

def _sech2(t):
    # 4 e^{-2|t|} / (1 + e^{-2|t|})^2: no overflow for any float input
    a = np.exp(-2.0 * np.abs(t))
    return 4.0 * a / (1.0 + a) ** 2


def _log_sech2(t):
    return 2.0 * (np.log(2.0) - np.abs(t) - np.log1p(np.exp(-2.0 * np.abs(t))))


def _check_nonzero(t):
    if np.any(t == 0.0):
        raise DomainError("inverse link is undefined at theta = 0")
    return t


@dataclass(frozen=True)
class Link:
    """Scalar link ``sigma`` applied coordinate-wise to parameters.

    ``deriv_ratio`` is ``sigma''/sigma' = d/dt log|sigma'(t)|``, the quantity
    entering closed-form log-determinant gradients.  ``log_abs_deriv`` is
    computed in log space so saturated links do not underflow.
    """

    name: str
    value: Callable
    deriv: Callable
    deriv_ratio: Callable
    log_abs_deriv: Callable
    check_domain: Callable = staticmethod(lambda t: t)


LINKS = {
    "tanh": Link(
        "tanh",
        value=np.tanh,
        deriv=_sech2,
        deriv_ratio=lambda t: -2.0 * np.tanh(t),
        log_abs_deriv=_log_sech2,
    ),
    "identity": Link(
        "identity",
        value=lambda t: np.asarray(t, dtype=float),
        deriv=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        deriv_ratio=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        log_abs_deriv=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
    ),
    "inverse": Link(
        "inverse",
        value=lambda t: 1.0 / t,
        deriv=lambda t: -1.0 / t**2,
        deriv_ratio=lambda t: -2.0 / t,
        log_abs_deriv=lambda t: -2.0 * np.log(np.abs(t)),
        check_domain=_check_nonzero,
    ),
    "exp": Link(
        "exp",
        value=np.exp,
        deriv=np.exp,
        deriv_ratio=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        log_abs_deriv=lambda t: np.asarray(t, dtype=float),
    ),
}


# ---------------------------------------------------------------------------
# Base class
# ---------------------------------------------------------------------------

class DifferentiableModel:
    """A parametric map with exact Jacobians and reverse-mode gradients."""

    param_count: int
    input_dim: int
    output_dim: int

    # -- validation -------------------------------------------------------
    def _check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_count,):
            raise DimensionError(
                f"theta must have shape ({self.param_count},), got {theta.shape}"
            )
        return theta

    def _check_inputs(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if xs.ndim == 1 and self.input_dim == 1:
            xs = xs[:, None]
        if xs.ndim != 2 or xs.shape[1] != self.input_dim:
            raise DimensionError(
                f"inputs must have shape (M, {self.input_dim}), got {xs.shape}"
            )
        return xs

    # -- abstract surface ---------------------------------------------------
    def evaluate(self, theta, xs) -> np.ndarray:
        """Model outputs, shape ``(M, K)``."""
        raise NotImplementedError

    def jacobian(self, theta, xs) -> np.ndarray:
        """Stacked parameter Jacobian, shape ``(M*K, P)``, row ``(m, k)``
        at index ``m*K + k``."""
        raise NotImplementedError

    def vjp(self, theta, xs, cotangent) -> np.ndarray:
        """Gradient of ``sum(cotangent * f(theta, xs))`` with respect to
        theta, computed by reverse-mode accumulation."""
        raise NotImplementedError

    def jacobian_weighted_grad(self, theta, xs, weights) -> np.ndarray:
        """Gradient of ``sum(weights * jacobian)`` with frozen weights.

        ``weights`` has shape ``(M*K, P)`` (or ``(M, K, P)``); the result is
        ``v_p = d/d theta_p sum_{m,k,q} weights[m,k,q] * dF_k(x_m)/d theta_q``,
        the contraction of the per-output Hessians with the weight rows.
        """
        raise NotImplementedError

    def evaluate_many(self, thetas, xs) -> np.ndarray:
        """Outputs for a batch of parameter vectors, shape ``(G, M, K)``."""
        thetas = np.asarray(thetas, dtype=float)
        return np.stack([self.evaluate(t, xs) for t in thetas])

    def _weights_as_rows(self, weights, n_points) -> np.ndarray:
        w = np.asarray(weights, dtype=float)
        rows = n_points * self.output_dim
        if w.shape == (n_points, self.output_dim, self.param_count):
            return w.reshape(rows, self.param_count)
        if w.shape == (rows, self.param_count):
            return w
        raise DimensionError(
            f"weights must have shape ({rows}, {self.param_count}) or "
            f"({n_points}, {self.output_dim}, {self.param_count}), got {w.shape}"
        )


def loss_gradient(model: DifferentiableModel, theta, xs, loss_adjoint) -> np.ndarray:
    """Backpropagate a scalar loss through ``model.evaluate``.

    ``loss_adjoint`` is ``d loss / d f`` with shape ``(M, K)``; the return
    value is the exact gradient of the loss with respect to theta.
    """
    adjoint = np.asarray(loss_adjoint, dtype=float)
    xs = model._check_inputs(xs)
    if adjoint.shape != (xs.shape[0], model.output_dim):
        raise DimensionError(
            f"loss adjoint must have shape ({xs.shape[0]}, {model.output_dim}), "
            f"got {adjoint.shape}"
        )
    return model.vjp(theta, xs, adjoint)


# ---------------------------------------------------------------------------
# Link-basis models: f(x) = sum_i link(theta_i) * basis_i(x)
# ---------------------------------------------------------------------------

class LinkBasisModel(DifferentiableModel):
    """Model linear in a fixed basis after a coordinate-wise link."""

    output_dim = 1

    def __init__(self, link: str):
        if link not in LINKS:
            raise ValueError(f"unknown link {link!r}; choose from {sorted(LINKS)}")
        self.link = LINKS[link]

    def basis(self, xs) -> np.ndarray:
        """Basis values, shape ``(M, P)``."""
        raise NotImplementedError

    # analytic derivatives all factor through the basis matrix
    def evaluate(self, theta, xs):
        theta = self.link.check_domain(self._check_theta(theta))
        B = self.basis(self._check_inputs(xs))
        return (B @ self.link.value(theta))[:, None]

    def jacobian(self, theta, xs):
        theta = self.link.check_domain(self._check_theta(theta))
        B = self.basis(self._check_inputs(xs))
        return self.link.deriv(theta)[None, :] * B

    def vjp(self, theta, xs, cotangent):
        theta = self.link.check_domain(self._check_theta(theta))
        xs = self._check_inputs(xs)
        cot = np.asarray(cotangent, dtype=float).reshape(xs.shape[0])
        out = (self.basis(xs).T @ cot) * self.link.deriv(theta)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite gradient in link-basis vjp", 0)
        return out

    def jacobian_weighted_grad(self, theta, xs, weights):
        theta = self.link.check_domain(self._check_theta(theta))
        xs = self._check_inputs(xs)
        W = self._weights_as_rows(weights, xs.shape[0])
        B = self.basis(xs)
        second = self.link.deriv(theta) * self.link.deriv_ratio(theta)
        return second * np.sum(W * B, axis=0)

    def evaluate_many(self, thetas, xs):
        thetas = np.asarray(thetas, dtype=float)
        B = self.basis(self._check_inputs(xs))
        vals = self.link.value(self.link.check_domain(thetas)) @ B.T
        return vals[:, :, None]

    # log|sigma'(theta_i)| in log space; safe at strong saturation
    def log_abs_link_deriv(self, theta):
        theta = self.link.check_domain(self._check_theta(theta))
        return self.link.log_abs_deriv(theta)

    def link_deriv(self, theta):
        theta = self.link.check_domain(self._check_theta(theta))
        return self.link.deriv(theta)


class FourierLinkModel(LinkBasisModel):
    """Linked Fourier-feature model on the interval [-1, 1].

    The basis is ``{cos(k_i x)} ++ {sin(k_i x)}`` with ``k_i = i*pi`` for
    ``i = 1..num_frequencies`` (custom frequency arrays are accepted, e.g.
    to build deliberately degenerate bases).  ``P = 2 * num_frequencies``.
    """

    input_dim = 1

    def __init__(self, num_frequencies: int = 100, link: str = "tanh",
                 frequencies=None):
        super().__init__(link)
        if frequencies is None:
            frequencies = np.pi * np.arange(1, int(num_frequencies) + 1, dtype=float)
        self.frequencies = np.asarray(frequencies, dtype=float)
        if self.frequencies.ndim != 1 or self.frequencies.size == 0:
            raise DimensionError("frequencies must be a non-empty 1-D array")
        self.num_frequencies = self.frequencies.size
        self.param_count = 2 * self.num_frequencies

    def basis(self, xs):
        kx = xs[:, :1] * self.frequencies[None, :]
        return np.concatenate([np.cos(kx), np.sin(kx)], axis=1)


class GaussianBumpModel(LinkBasisModel):
    """Two Gaussian bumps with heights ``exp(theta)``; outputs are strictly
    positive for all finite parameters."""

    input_dim = 1

    def __init__(self, centers=(0.25, 0.75), width: float = 0.1,
                 domain=(0.0, 1.0)):
        super().__init__("exp")
        self.centers = np.asarray(centers, dtype=float)
        if self.centers.ndim != 1:
            raise DimensionError("centers must be a 1-D array")
        if not width > 0:
            raise DomainError("width must be positive")
        self.width = float(width)
        self.domain = (float(domain[0]), float(domain[1]))
        self.param_count = self.centers.size

    def basis(self, xs):
        z = (xs[:, :1] - self.centers[None, :]) / self.width
        return np.exp(-0.5 * z**2)


# ---------------------------------------------------------------------------
# Multilayer perceptron
# ---------------------------------------------------------------------------

def _tanh_acts(z):
    t = np.tanh(z)
    return t, 1.0 - t**2, -2.0 * t * (1.0 - t**2)


def _relu_acts(z):
    mask = (z > 0).astype(float)
    return z * mask, mask, np.zeros_like(z)


_ACTIVATIONS = {"tanh": _tanh_acts, "relu": _relu_acts}


class MlpModel(DifferentiableModel):
    """Dense MLP over flattened parameters.

    Parameter layout per layer ``l`` (in order): weight matrix ``W_l`` of
    shape ``(n_l, n_{l-1})`` flattened row-major, then bias ``b_l``.  Hidden
    layers apply the activation; the output layer is linear.
    """

    def __init__(self, layer_widths, activation: str = "tanh"):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise DimensionError("layer_widths must list >= 2 positive widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_widths = widths
        self.activation = activation
        self._act = _ACTIVATIONS[activation]
        self.input_dim = widths[0]
        self.output_dim = widths[-1]
        self.param_count = sum(
            widths[l + 1] * widths[l] + widths[l + 1] for l in range(len(widths) - 1)
        )

    # -- parameter packing --------------------------------------------------
    def unpack(self, theta):
        theta = self._check_theta(theta)
        layers, offset = [], 0
        for n_in, n_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            W = theta[offset:offset + n_out * n_in].reshape(n_out, n_in)
            offset += n_out * n_in
            b = theta[offset:offset + n_out]
            offset += n_out
            layers.append((W, b))
        return layers

    def pack(self, layers):
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])

    def init_params(self, seed: int) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, seeded."""
        rng = stream(seed, INIT_DOMAIN)
        parts = []
        for n_in, n_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            bound = 1.0 / np.sqrt(n_in)
            parts.append(rng.uniform(-bound, bound, size=n_out * n_in))
            parts.append(rng.uniform(-bound, bound, size=n_out))
        return np.concatenate(parts)

    # -- forward -------------------------------------------------------------
    def _forward(self, layers, xs):
        acts = [xs]         # a_0 .. a_{L-1}: layer inputs
        derivs, seconds = [], []
        a = xs
        n_layers = len(layers)
        for l, (W, b) in enumerate(layers):
            z = a @ W.T + b
            if not np.all(np.isfinite(z)):
                raise NonFiniteError("non-finite pre-activation in MLP forward", l)
            if l < n_layers - 1:
                a, d, s = self._act(z)
                derivs.append(d)
                seconds.append(s)
                acts.append(a)
            else:
                a = z
        return a, acts, derivs, seconds

    def evaluate(self, theta, xs):
        layers = self.unpack(theta)
        xs = self._check_inputs(xs)
        out, _, _, _ = self._forward(layers, xs)
        return out

    def evaluate_many(self, thetas, xs, chunk: int = 64):
        thetas = np.asarray(thetas, dtype=float)
        xs = self._check_inputs(xs)
        out = np.empty((thetas.shape[0], xs.shape[0], self.output_dim))
        for lo in range(0, thetas.shape[0], chunk):
            batch = thetas[lo:lo + chunk]
            a = np.broadcast_to(xs, (batch.shape[0],) + xs.shape)
            offset = 0
            n_steps = len(self.layer_widths) - 1
            for l, (n_in, n_out) in enumerate(
                    zip(self.layer_widths[:-1], self.layer_widths[1:])):
                W = batch[:, offset:offset + n_out * n_in].reshape(-1, n_out, n_in)
                offset += n_out * n_in
                b = batch[:, offset:offset + n_out]
                offset += n_out
                z = np.einsum("gmj,gij->gmi", a, W) + b[:, None, :]
                a = self._act(z)[0] if l < n_steps - 1 else z
            out[lo:lo + chunk] = a
        return out

    # -- derivatives ----------------------------------------------------------
    def _output_sensitivities(self, layers, derivs, n_points):
        """g_l[m, k, i] = d f_k(x_m) / d z_l[i], for every layer."""
        n_layers = len(layers)
        M, K = n_points, self.output_dim
        g = [None] * n_layers
        g[n_layers - 1] = np.broadcast_to(np.eye(K), (M, K, K)).copy()
        for l in range(n_layers - 2, -1, -1):
            W_next = layers[l + 1][0]
            back = np.einsum("mkj,ji->mki", g[l + 1], W_next)
            g[l] = back * derivs[l][:, None, :]
        return g

    def jacobian(self, theta, xs):
        layers = self.unpack(theta)
        xs = self._check_inputs(xs)
        _, acts, derivs, _ = self._forward(layers, xs)
        M, K, P = xs.shape[0], self.output_dim, self.param_count
        g = self._output_sensitivities(layers, derivs, xs.shape[0])
        J = np.empty((M, K, P))
        offset = 0
        for l, (W, b) in enumerate(layers):
            n_out, n_in = W.shape
            JW = np.einsum("mki,mj->mkij", g[l], acts[l])
            J[:, :, offset:offset + n_out * n_in] = JW.reshape(M, K, n_out * n_in)
            offset += n_out * n_in
            J[:, :, offset:offset + n_out] = g[l]
            offset += n_out
        return J.reshape(M * K, P)

    def vjp(self, theta, xs, cotangent):
        layers = self.unpack(theta)
        xs = self._check_inputs(xs)
        cot = np.asarray(cotangent, dtype=float)
        if cot.shape != (xs.shape[0], self.output_dim):
            raise DimensionError(
                f"cotangent must have shape ({xs.shape[0]}, {self.output_dim}), "
                f"got {cot.shape}"
            )
        _, acts, derivs, _ = self._forward(layers, xs)
        grads = [None] * len(layers)
        delta = cot
        for l in range(len(layers) - 1, -1, -1):
            if not np.all(np.isfinite(delta)):
                raise NonFiniteError("non-finite adjoint in MLP backward", l)
            W, _ = layers[l]
            grads[l] = (delta.T @ acts[l], delta.sum(axis=0))
            if l > 0:
                delta = (delta @ W) * derivs[l - 1]
        return self.pack(grads)

    def jacobian_weighted_grad(self, theta, xs, weights):
        """Second-order reverse-over-forward pass.

        Computes ``sum_{m,k} H^{(m,k)} w_{m,k}`` where ``H^{(m,k)}`` is the
        parameter Hessian of output ``k`` at input ``x_m`` and ``w_{m,k}``
        the corresponding weight row: the tangent (R-) derivative of the
        per-output backprop gradient along ``w_{m,k}``.
        """
        layers = self.unpack(theta)
        xs = self._check_inputs(xs)
        M, K = xs.shape[0], self.output_dim
        W_rows = self._weights_as_rows(weights, M).reshape(M, K, self.param_count)

        # slice the tangent vectors into per-layer weight/bias blocks
        tangents, offset = [], 0
        for W, b in layers:
            n_out, n_in = W.shape
            tW = W_rows[:, :, offset:offset + n_out * n_in].reshape(M, K, n_out, n_in)
            offset += n_out * n_in
            tb = W_rows[:, :, offset:offset + n_out]
            offset += n_out
            tangents.append((tW, tb))

        _, acts, derivs, seconds = self._forward(layers, xs)

        # tangent forward: Ra_l[m,k,:] along tangent w_{m,k}
        r_acts = [np.zeros((M, K, self.input_dim))]
        r_zs = []
        a = acts[0]
        for l, (W, b) in enumerate(layers):
            tW, tb = tangents[l]
            rz = np.einsum("mkij,mj->mki", tW, acts[l]) \
                + np.einsum("ij,mkj->mki", W, r_acts[l]) + tb
            r_zs.append(rz)
            if l < len(layers) - 1:
                r_acts.append(derivs[l][:, None, :] * rz)

        # primal backward sensitivities and their tangents
        g = self._output_sensitivities(layers, derivs, xs.shape[0])
        r_g = [None] * len(layers)
        r_g[-1] = np.zeros((M, K, self.output_dim))
        for l in range(len(layers) - 2, -1, -1):
            W_next = layers[l + 1][0]
            tW_next = tangents[l + 1][0]
            pre = np.einsum("mkj,ji->mki", g[l + 1], W_next)
            r_pre = np.einsum("mkj,ji->mki", r_g[l + 1], W_next) \
                + np.einsum("mkj,mkji->mki", g[l + 1], tW_next)
            r_g[l] = r_pre * derivs[l][:, None, :] \
                + pre * seconds[l][:, None, :] * r_zs[l]

        out = []
        for l in range(len(layers)):
            gW = np.einsum("mki,mj->ij", r_g[l], acts[l]) \
                + np.einsum("mki,mkj->ij", g[l], r_acts[l])
            gb = r_g[l].sum(axis=(0, 1))
            out.append((gW, gb))
        return self.pack(out)


# ---------------------------------------------------------------------------
# Reparameterization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Reparameterization:
    """Coordinate-wise bijection between two link parameterizations.

    ``forward`` maps source parameters to target parameters so that the
    target-link model at ``forward(theta)`` represents the same function as
    the source-link model at ``theta``.  ``log_abs_det_jac`` is
    ``log|det d theta' / d theta|`` evaluated at source parameters;
    ``inv_deriv``/``inv_second_deriv`` are the coordinate-wise first and
    second derivatives of the inverse map, used for transformed priors.
    """

    source_link: str
    target_link: str
    forward: Callable
    inverse: Callable
    log_abs_det_jac: Callable
    inv_deriv: Callable
    inv_second_deriv: Callable


def _arctanh_domain(t):
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) >= 1.0):
        raise DomainError("arctanh transform requires |theta| < 1")
    return t


def _inverse_domain(t):
    t = np.asarray(t, dtype=float)
    if np.any(t == 0.0):
        raise DomainError("1/theta transform is undefined at theta = 0")
    return t


_REPARAMS = {
    ("tanh", "identity"): Reparameterization(
        "tanh", "identity",
        forward=np.tanh,
        inverse=lambda t: np.arctanh(_arctanh_domain(t)),
        log_abs_det_jac=lambda t: float(np.sum(_log_sech2(t))),
        inv_deriv=lambda t: 1.0 / (1.0 - _arctanh_domain(t) ** 2),
        inv_second_deriv=lambda t: 2.0 * t / (1.0 - _arctanh_domain(t) ** 2) ** 2,
    ),
    ("identity", "tanh"): Reparameterization(
        "identity", "tanh",
        forward=lambda t: np.arctanh(_arctanh_domain(t)),
        inverse=np.tanh,
        log_abs_det_jac=lambda t: float(-np.sum(np.log1p(-_arctanh_domain(t) ** 2))),
        inv_deriv=_sech2,
        inv_second_deriv=lambda t: -2.0 * np.tanh(t) * _sech2(t),
    ),
    ("identity", "inverse"): Reparameterization(
        "identity", "inverse",
        forward=lambda t: 1.0 / _inverse_domain(t),
        inverse=lambda t: 1.0 / _inverse_domain(t),
        log_abs_det_jac=lambda t: float(-2.0 * np.sum(np.log(np.abs(_inverse_domain(t))))),
        inv_deriv=lambda t: -1.0 / _inverse_domain(t) ** 2,
        inv_second_deriv=lambda t: 2.0 / _inverse_domain(t) ** 3,
    ),
    ("inverse", "identity"): Reparameterization(
        "inverse", "identity",
        forward=lambda t: 1.0 / _inverse_domain(t),
        inverse=lambda t: 1.0 / _inverse_domain(t),
        log_abs_det_jac=lambda t: float(-2.0 * np.sum(np.log(np.abs(_inverse_domain(t))))),
        inv_deriv=lambda t: -1.0 / _inverse_domain(t) ** 2,
        inv_second_deriv=lambda t: 2.0 / _inverse_domain(t) ** 3,
    ),
}


def reparameterize(model: LinkBasisModel, target_link: str):
    """Rewrite a link-basis model in a different link's coordinates.

    Returns ``(new_model, reparam)`` where the new model uses
    ``target_link`` over the same basis and ``reparam`` carries the
    coordinate change plus the prior-density correction: the two models
    satisfy ``new_model(reparam.forward(theta)) == model(theta)`` exactly.
    """
    if not isinstance(model, LinkBasisModel):
        raise DomainError("reparameterize requires a link-basis model")
    key = (model.link.name, target_link)
    if key not in _REPARAMS:
        raise DomainError(f"no reparameterization registered for {key}")
    if isinstance(model, FourierLinkModel):
        new_model = FourierLinkModel(link=target_link, frequencies=model.frequencies)
    else:
        raise DomainError("reparameterization is only provided for Fourier models")
    return new_model, _REPARAMS[key]
