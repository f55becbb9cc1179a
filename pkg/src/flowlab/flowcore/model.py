"""Flow-based class-conditional density model."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from ..objectives import ObjectiveSpec, objective_value_and_grad
from ..priors import GMMPrior, Prior
from .layers import (ActNormLayer, CouplingLayer, InvLinearLayer, actnorm_initialize,
                     half_partition)


class NumericalError(ArithmeticError):
    """Non-finite value inside the flow; ``where`` names the layer or parameter."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


class FlowModel:
    """``log p(x|y) = log p_prior(f(x) | y) + sum_i log|det J_i|``.

    Parameters
    ----------
    dim, n_classes : int
    layers : list
        Applied in order, data side first.
    prior : Prior
        Class-conditional latent density over ``dim`` dimensions.
    class_probs : array_like, optional
        ``p(y)``; uniform by default.
    seed : int, optional
        Construction seed, kept for serialization.
    """

    def __init__(self, dim, n_classes, layers, prior: Prior, class_probs=None, seed=None):
        self.dim = int(dim)
        self.n_classes = int(n_classes)
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            if layer.dim != self.dim:
                raise ValueError(f"layer {i} has dimension {layer.dim}, model has {self.dim}")
        if prior.dim != self.dim or prior.n_classes != self.n_classes:
            raise ValueError("prior dimensions do not match the model")
        self.prior = prior
        if class_probs is None:
            class_probs = np.full(self.n_classes, 1.0 / self.n_classes)
        class_probs = np.asarray(class_probs, dtype=np.float64)
        if class_probs.shape != (self.n_classes,) or np.any(class_probs < 0) \
                or abs(class_probs.sum() - 1.0) > 1e-12:
            raise ValueError("class probabilities must be a simplex vector")
        self.class_probs = class_probs
        self.seed = seed

    @property
    def log_py(self):
        with np.errstate(divide="ignore"):
            return np.log(self.class_probs)

    @property
    def initialized(self):
        return all(l.initialized for l in self.layers if isinstance(l, ActNormLayer))

    def initialize(self, x):
        """Data-dependent init of every actnorm layer, in order, from batch ``x``."""
        h, _ = _as_batch(x)
        for layer in self.layers:
            if isinstance(layer, ActNormLayer) and not layer.initialized:
                actnorm_initialize(layer, h)
            h, _ = layer.forward(h)
        return self

    def forward(self, x):
        """Map data to latent space.

        Returns ``(z, logdet, trace)`` where ``trace[i]`` is the input of
        layer ``i``. Single vectors give single-vector outputs.
        """
        h, single = _as_batch(x)
        if not np.all(np.isfinite(h)):
            raise NumericalError("non-finite input", where="input")
        logdet = np.zeros(len(h))
        trace = []
        for i, layer in enumerate(self.layers):
            trace.append(h)
            with np.errstate(over="ignore", invalid="ignore"):
                h, ld = layer.forward(h)
            if not (np.all(np.isfinite(h)) and np.all(np.isfinite(ld))):
                raise NumericalError(f"numerical overflow in layer {i}", where=i)
            logdet = logdet + ld
        if single:
            return h[0], logdet[0], trace
        return h, logdet, trace

    def inverse(self, z):
        h, single = _as_batch(z)
        if not np.all(np.isfinite(h)):
            raise NumericalError("non-finite latent", where="input")
        for i in range(len(self.layers) - 1, -1, -1):
            with np.errstate(over="ignore", invalid="ignore"):
                h = self.layers[i].inverse(h)
            if not np.all(np.isfinite(h)):
                raise NumericalError(f"numerical overflow in layer {i}", where=i)
        return h[0] if single else h

    def class_log_likelihoods(self, x):
        """``(N, C)`` array of ``log p(x | y=c)`` (nats)."""
        h, single = _as_batch(x)
        z, logdet, _ = self.forward(h)
        out = self.prior.logprob_all(z) + logdet[:, None]
        return out[0] if single else out

    def log_likelihood(self, x, y):
        """``log p(x | y)`` in nats."""
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValueError(f"invalid class index {y!r}")
        L = self.class_log_likelihoods(x)
        if L.ndim == 1:
            return L[int(y)]
        return L[np.arange(len(L)), np.broadcast_to(y, (len(L),))]

    def log_marginal(self, x):
        """``log p(x) = log sum_y p(x|y) p(y)``."""
        L = self.class_log_likelihoods(x)
        return logsumexp(L + self.log_py, axis=-1)

    def backward(self, trace, z, grad_L):
        """Reverse pass from ``dObj/dL`` to the input and every parameter."""
        grads = {}
        g_z, prior_grads = self.prior.logprob_all_backward(z, grad_L)
        for k, v in prior_grads.items():
            grads[f"prior.{k}"] = v
        g_ld = grad_L.sum(axis=1)
        for i in range(len(self.layers) - 1, -1, -1):
            g_z, layer_grads = self.layers[i].backward(trace[i], g_z, g_ld)
            for k, v in layer_grads.items():
                grads[f"layers.{i}.{k}"] = v
        return g_z, grads

    def parameters(self):
        """Live parameter arrays keyed by dotted path."""
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"layers.{i}.{k}"] = v
        for k, v in self.prior.params().items():
            out[f"prior.{k}"] = v
        return out

    def n_parameters(self):
        return sum(v.size for v in self.parameters().values())

    def parameter_gradients(self, x, y, objective: ObjectiveSpec):
        """Batch-mean objective and its gradient for every parameter path."""
        return parameter_gradients(self, x, y, objective)


def _value_and_grads(model, x, y, objective, want_input_grad=False):
    x, _ = _as_batch(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty batch")
    # overflow shows up as non-finite values, which callers check explicitly
    with np.errstate(over="ignore", invalid="ignore"):
        z, logdet, trace = model.forward(x)
        L = model.prior.logprob_all(z) + logdet[:, None]
        value, grad_L = objective_value_and_grad(objective, L, y, model.log_py, model.dim)
        grad_x, grads = model.backward(trace, z, grad_L)
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient at {path}", where=path)
    if want_input_grad:
        return value, grads, grad_x
    return value, grads


def parameter_gradients(model: FlowModel, x, y, objective: ObjectiveSpec):
    """Return ``(value, grads)`` for the batch-mean ``objective``.

    ``grads`` has one entry per path in ``model.parameters()`` with a matching
    shape. Non-finite gradients raise :class:`NumericalError` naming the path.
    """
    value, grads = _value_and_grads(model, x, y, objective)
    params = model.parameters()
    return value, {k: grads.get(k, np.zeros_like(v)) for k, v in params.items()}


def build_flow(dim, n_classes, n_steps=4, hidden=(32,), mixing="lu", prior=None,
               scale_clamp=2.0, seed=0, actnorm=True, class_probs=None):
    """Stack of Glow-style steps: ``[actnorm] -> invlinear -> coupling``.

    Couplings alternate which half of the vector is transformed.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(n_steps):
        if actnorm:
            layers.append(ActNormLayer(dim))
        if mixing is not None:
            layers.append(InvLinearLayer(dim, mode=mixing, rng=rng))
        idx_a, idx_b = half_partition(dim, swap=bool(k % 2))
        layers.append(CouplingLayer(dim, idx_a, idx_b, hidden=hidden,
                                    scale_clamp=scale_clamp, rng=rng))
    if prior is None:
        prior = GMMPrior.standard(n_classes, dim, spread=1.0, rng=rng)
    return FlowModel(dim, n_classes, layers, prior, class_probs=class_probs, seed=seed)
