"""Bijective layers with exact log-determinants and hand-written reverse passes.

Every layer works on batches of row vectors, shape ``(N, D)``, and exposes

* ``forward(x) -> (z, logdet)`` with ``logdet`` of shape ``(N,)``,
* ``inverse(z) -> x``,
* ``backward(x, grad_z, grad_logdet) -> (grad_x, grads)`` where ``grads`` maps
  parameter names to arrays shaped like the parameters,
* ``params()`` returning the live parameter arrays (mutated in place by
  optimizers).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

_U_DIAG_FLOOR = 1e-6


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_inv(y):
    # log(exp(y) - 1), stable for large y
    return y + np.log(-np.expm1(-y))


class MLPNet:
    """Fully connected tanh network used inside couplings and prior heads.

    Weights are stored as ``(fan_in, fan_out)`` matrices so that a batch of
    row vectors maps as ``h @ W + b``.
    """

    activation = "tanh"

    def __init__(self, widths, rng=None, zero_last=True, weights=None, biases=None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        if weights is not None:
            self.weights = [np.array(w, dtype=np.float64) for w in weights]
            self.biases = [np.array(b, dtype=np.float64) for b in biases]
            for i, (w, b) in enumerate(zip(self.weights, self.biases)):
                if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                    raise ValueError(f"parameter shape mismatch in MLP layer {i}")
            return
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        n_lin = len(widths) - 1
        for i in range(n_lin):
            fan_in, fan_out = widths[i], widths[i + 1]
            if zero_last and i == n_lin - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    def forward(self, x):
        """Return the output and the list of post-activation hidden states."""
        hidden = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            hidden.append(h)
        return h, hidden

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, hidden, grad_out):
        grads = {}
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (1.0 - hidden[i + 1] ** 2)
            grads[f"W{i}"] = hidden[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return g, grads

    def params(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def to_dict(self):
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["widths"], weights=d["weights"], biases=d["biases"])


class ActNormLayer:
    """Per-dimension affine map ``z = x * exp(log_scale) + bias``."""

    kind = "actnorm"

    def __init__(self, dim, log_scale=None, bias=None, initialized=False):
        self.dim = int(dim)
        self.log_scale = np.zeros(dim) if log_scale is None else np.array(log_scale, dtype=np.float64)
        self.bias = np.zeros(dim) if bias is None else np.array(bias, dtype=np.float64)
        self.initialized = bool(initialized)

    def _check(self):
        if not self.initialized:
            raise RuntimeError("actnorm layer used before data-dependent initialization")

    def forward(self, x):
        self._check()
        z = x * np.exp(self.log_scale) + self.bias
        logdet = np.full(x.shape[0], self.log_scale.sum())
        return z, logdet

    def inverse(self, z):
        self._check()
        return (z - self.bias) * np.exp(-self.log_scale)

    def backward(self, x, grad_z, grad_logdet):
        scale = np.exp(self.log_scale)
        grads = {
            "log_scale": (grad_z * x).sum(axis=0) * scale + grad_logdet.sum(),
            "bias": grad_z.sum(axis=0),
        }
        return grad_z * scale, grads

    def params(self):
        return {"log_scale": self.log_scale, "bias": self.bias}

    def to_dict(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "initialized": self.initialized,
            "log_scale": self.log_scale.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dim"], d["log_scale"], d["bias"], d["initialized"])


def actnorm_initialize(layer: ActNormLayer, batch_z) -> ActNormLayer:
    """Set ``layer`` so its outputs on ``batch_z`` have zero mean and unit variance.

    Population (``ddof=0``) statistics are used. The layer is modified in
    place and returned.
    """
    batch_z = np.atleast_2d(np.asarray(batch_z, dtype=np.float64))
    if batch_z.shape[0] < 2:
        raise ValueError("degenerate init batch: need at least 2 samples")
    mean = batch_z.mean(axis=0)
    std = batch_z.std(axis=0)
    if np.any(std <= 0.0) or not np.all(np.isfinite(std)):
        raise ValueError("degenerate init batch: zero-variance dimension")
    layer.log_scale[...] = -np.log(std)
    layer.bias[...] = -mean / std
    layer.initialized = True
    return layer


def half_partition(dim, swap=False):
    """First half / second half index split, optionally swapped."""
    if dim < 2:
        raise ValueError("coupling needs dim >= 2")
    first = np.arange(dim // 2)
    second = np.arange(dim // 2, dim)
    return (second, first) if swap else (first, second)


class CouplingLayer:
    """Affine coupling: dims ``B`` are scaled and shifted by a net of dims ``A``.

    ``z_B = s(x_A) * x_B + t(x_A)`` with ``s = exp(c_s * tanh(raw))`` so the
    scale is strictly positive and ``|log s| < c_s``.
    """

    kind = "coupling"

    def __init__(self, dim, idx_a, idx_b, hidden=(32,), scale_clamp=2.0, rng=None, net=None):
        self.dim = int(dim)
        self.idx_a = np.asarray(idx_a, dtype=np.int64)
        self.idx_b = np.asarray(idx_b, dtype=np.int64)
        if len(self.idx_a) < 1 or len(self.idx_b) < 1:
            raise ValueError("coupling partition sets must be non-empty")
        both = np.concatenate([self.idx_a, self.idx_b])
        if not np.array_equal(np.sort(both), np.arange(self.dim)):
            raise ValueError("coupling partition must split {0..D-1} into disjoint sets")
        if scale_clamp <= 0:
            raise ValueError("scale_clamp must be positive")
        self.scale_clamp = float(scale_clamp)
        n_b = len(self.idx_b)
        self.net = net if net is not None else MLPNet((len(self.idx_a), *hidden, 2 * n_b), rng=rng)

    def _scale_shift(self, xa):
        out, hidden = self.net.forward(xa)
        n_b = len(self.idx_b)
        raw, shift = out[:, :n_b], out[:, n_b:]
        th = np.tanh(raw)
        log_s = self.scale_clamp * th
        return log_s, shift, th, hidden

    def forward(self, x):
        xa = x[:, self.idx_a]
        log_s, shift, _, _ = self._scale_shift(xa)
        z = x.copy()
        z[:, self.idx_b] = x[:, self.idx_b] * np.exp(log_s) + shift
        return z, log_s.sum(axis=1)

    def inverse(self, z):
        za = z[:, self.idx_a]
        log_s, shift, _, _ = self._scale_shift(za)
        x = z.copy()
        x[:, self.idx_b] = (z[:, self.idx_b] - shift) * np.exp(-log_s)
        return x

    def backward(self, x, grad_z, grad_logdet):
        xa = x[:, self.idx_a]
        xb = x[:, self.idx_b]
        log_s, _, th, hidden = self._scale_shift(xa)
        s = np.exp(log_s)
        gzb = grad_z[:, self.idx_b]
        g_log_s = gzb * xb * s + grad_logdet[:, None]
        g_raw = g_log_s * self.scale_clamp * (1.0 - th**2)
        g_net_in, net_grads = self.net.backward(hidden, np.concatenate([g_raw, gzb], axis=1))
        grad_x = np.empty_like(x)
        grad_x[:, self.idx_b] = gzb * s
        grad_x[:, self.idx_a] = grad_z[:, self.idx_a] + g_net_in
        return grad_x, {f"net.{k}": v for k, v in net_grads.items()}

    def params(self):
        return {f"net.{k}": v for k, v in self.net.params().items()}

    def to_dict(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "idx_a": self.idx_a.tolist(),
            "idx_b": self.idx_b.tolist(),
            "scale_clamp": self.scale_clamp,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dim"], d["idx_a"], d["idx_b"], scale_clamp=d["scale_clamp"],
                   net=MLPNet.from_dict(d["net"]))


class InvLinearLayer:
    """Invertible channel mixing ``z = W x``.

    Two modes: ``"perm"`` (a fixed permutation, no parameters) and ``"lu"``
    where ``W = P L U`` with ``L`` unit lower triangular and ``U`` upper
    triangular whose diagonal is ``sign * (softplus(raw) + 1e-6)``.
    """

    kind = "invlinear"

    def __init__(self, dim, mode="lu", rng=None, perm=None, lower=None, upper=None,
                 diag_raw=None, diag_sign=None):
        self.dim = int(dim)
        if mode not in ("lu", "perm"):
            raise ValueError(f"unknown InvLinear mode {mode!r}")
        self.mode = mode
        rng = np.random.default_rng(rng)
        if mode == "perm":
            self.perm = rng.permutation(dim) if perm is None else np.asarray(perm, dtype=np.int64)
            if not np.array_equal(np.sort(self.perm), np.arange(dim)):
                raise ValueError("permutation is not a bijection")
            self.inv_perm = np.argsort(self.perm)
            return
        if lower is None:
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            p_mat, l_mat, u_mat = scipy.linalg.lu(q)
            perm = np.argmax(p_mat, axis=1)  # row i of P has its 1 at column perm[i]
            lower = np.tril(l_mat, -1)
            upper = np.triu(u_mat, 1)
            diag = np.diag(u_mat)
            diag_sign = np.where(diag < 0, -1.0, 1.0)
            diag_raw = _softplus_inv(np.maximum(np.abs(diag) - _U_DIAG_FLOOR, 1e-12))
        self.perm = np.asarray(perm, dtype=np.int64)
        if not np.array_equal(np.sort(self.perm), np.arange(dim)):
            raise ValueError("permutation is not a bijection")
        self.lower = np.array(lower, dtype=np.float64)
        self.upper = np.array(upper, dtype=np.float64)
        self.diag_raw = np.array(diag_raw, dtype=np.float64)
        self.diag_sign = np.array(diag_sign, dtype=np.float64)
        self._lmask = np.tril(np.ones((dim, dim)), -1)
        self._umask = np.triu(np.ones((dim, dim)), 1)

    def _p_matrix(self):
        p = np.zeros((self.dim, self.dim))
        p[np.arange(self.dim), self.perm] = 1.0
        return p

    def _factors(self):
        mag = _softplus(self.diag_raw) + _U_DIAG_FLOOR
        l_mat = self.lower * self._lmask + np.eye(self.dim)
        u_mat = self.upper * self._umask + np.diag(self.diag_sign * mag)
        return l_mat, u_mat, mag

    def weight(self):
        if self.mode == "perm":
            w = np.zeros((self.dim, self.dim))
            w[np.arange(self.dim), self.perm] = 1.0
            return w
        l_mat, u_mat, _ = self._factors()
        return self._p_matrix() @ l_mat @ u_mat

    def forward(self, x):
        if self.mode == "perm":
            return x[:, self.perm], np.zeros(x.shape[0])
        l_mat, u_mat, mag = self._factors()
        w = self._p_matrix() @ l_mat @ u_mat
        return x @ w.T, np.full(x.shape[0], np.log(mag).sum())

    def inverse(self, z):
        if self.mode == "perm":
            return z[:, self.inv_perm]
        l_mat, u_mat, _ = self._factors()
        # W x = z  <=>  L U x = P^T z
        rhs = self._p_matrix().T @ z.T
        y = scipy.linalg.solve_triangular(l_mat, rhs, lower=True, unit_diagonal=True)
        return scipy.linalg.solve_triangular(u_mat, y, lower=False).T

    def backward(self, x, grad_z, grad_logdet):
        if self.mode == "perm":
            grad_x = np.empty_like(grad_z)
            grad_x[:, self.perm] = grad_z
            return grad_x, {}
        l_mat, u_mat, mag = self._factors()
        p_mat = self._p_matrix()
        w = p_mat @ l_mat @ u_mat
        grad_w = grad_z.T @ x
        grad_m = p_mat.T @ grad_w
        grad_l = (grad_m @ u_mat.T) * self._lmask
        grad_u_full = l_mat.T @ grad_m
        sig = _sigmoid(self.diag_raw)
        grad_raw = np.diag(grad_u_full) * self.diag_sign * sig + grad_logdet.sum() * sig / mag
        grads = {"lower": grad_l, "upper": grad_u_full * self._umask, "diag_raw": grad_raw}
        return grad_z @ w, grads

    def params(self):
        if self.mode == "perm":
            return {}
        return {"lower": self.lower, "upper": self.upper, "diag_raw": self.diag_raw}

    def to_dict(self):
        d = {"kind": self.kind, "dim": self.dim, "mode": self.mode, "perm": self.perm.tolist()}
        if self.mode == "lu":
            d.update(lower=self.lower.tolist(), upper=self.upper.tolist(),
                     diag_raw=self.diag_raw.tolist(), diag_sign=self.diag_sign.tolist())
        return d

    @classmethod
    def from_dict(cls, d):
        if d["mode"] == "perm":
            return cls(d["dim"], mode="perm", perm=d["perm"])
        return cls(d["dim"], mode="lu", perm=d["perm"], lower=d["lower"], upper=d["upper"],
                   diag_raw=d["diag_raw"], diag_sign=d["diag_sign"])


LAYER_KINDS = {cls.kind: cls for cls in (ActNormLayer, CouplingLayer, InvLinearLayer)}
