"""Class-conditional latent densities.

Every prior evaluates all classes at once: ``logprob_all(z)`` returns an
``(N, C)`` array of ``log p(z | y=c)``. ``logprob_all_backward(z, grad)``
pushes an ``(N, C)`` upstream gradient back to ``z`` and to the trainable
parameters. Diagonal covariances throughout.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .flowcore.layers import MLPNet

LOG_2PI = np.log(2.0 * np.pi)


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    return z[None, :] if z.ndim == 1 else z


def _check_class(y, n_classes):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= n_classes) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"invalid class index {y!r} for {n_classes} classes")
    return y


class Prior:
    """Shared plumbing; subclasses implement the density."""

    kind = "base"
    heavy_tailed = False
    n_classes: int
    dim: int

    def logprob(self, z, y):
        """``log p(z | y)`` for one class index or one index per row."""
        z = _as_batch(z)
        y = _check_class(y, self.n_classes)
        lp = self.logprob_all(z)
        out = lp[np.arange(len(z)), np.broadcast_to(y, (len(z),))]
        return out

    def params(self):
        return {}

    def sample(self, y, n, rng):
        raise NotImplementedError


class GMMPrior(Prior):
    """One diagonal Gaussian per class: ``N(mu_y, diag(sigma_y^2))``."""

    kind = "gmm"

    def __init__(self, means, log_std):
        self.means = np.array(means, dtype=np.float64)
        self.log_std = np.array(log_std, dtype=np.float64)
        if self.means.shape != self.log_std.shape or self.means.ndim != 2:
            raise ValueError("means and log_std must both be (C, D)")
        self.n_classes, self.dim = self.means.shape

    @classmethod
    def standard(cls, n_classes, dim, spread=0.0, rng=None):
        """Unit-variance components; means drawn ``N(0, spread^2)``."""
        means = np.zeros((n_classes, dim))
        if spread:
            means = np.random.default_rng(rng).normal(0.0, spread, size=(n_classes, dim))
        return cls(means, np.zeros((n_classes, dim)))

    def logprob_all(self, z):
        z = _as_batch(z)
        inv = np.exp(-self.log_std)
        u = (z[:, None, :] - self.means[None]) * inv[None]
        return -0.5 * (u**2).sum(axis=2) - self.log_std.sum(axis=1)[None] - 0.5 * self.dim * LOG_2PI

    def logprob_all_backward(self, z, grad):
        inv = np.exp(-self.log_std)
        u = (z[:, None, :] - self.means[None]) * inv[None]
        weighted = grad[:, :, None] * u * inv[None]
        grads = {
            "means": weighted.sum(axis=0),
            "log_std": (grad[:, :, None] * (u**2 - 1.0)).sum(axis=0),
        }
        return -weighted.sum(axis=1), grads

    def params(self):
        return {"means": self.means, "log_std": self.log_std}

    def sample(self, y, n, rng):
        rng = np.random.default_rng(rng)
        y = int(_check_class(y, self.n_classes))
        eps = rng.standard_normal((n, self.dim))
        return self.means[y] + np.exp(self.log_std[y]) * eps

    def to_dict(self):
        return {"kind": self.kind, "means": self.means.tolist(), "log_std": self.log_std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["means"], d["log_std"])


def _laplace_terms(z, loc, log_scale):
    inv = np.exp(-log_scale)
    diff = z[:, None, :] - loc[None]
    lp = -(np.abs(diff) * inv[None]).sum(axis=2) - (log_scale + np.log(2.0)).sum(axis=1)[None]
    return lp, diff, inv


def _cauchy_terms(z, loc, log_scale):
    inv = np.exp(-log_scale)
    u = (z[:, None, :] - loc[None]) * inv[None]
    lp = -np.log1p(u**2).sum(axis=2) - (log_scale + np.log(np.pi)).sum(axis=1)[None]
    return lp, u, inv


class RobustPrior(Prior):
    """Heavier-tailed class-conditional priors.

    ``family`` is one of ``"laplace"``, ``"cauchy"``, ``"gauss_laplace"`` or
    ``"gauss_cauchy"``. The two mixture families put weight ``weight`` on a
    Gaussian and ``1 - weight`` on the robust component, both centred on the
    shared per-class location.
    """

    kind = "robust"
    FAMILIES = ("laplace", "cauchy", "gauss_laplace", "gauss_cauchy")

    def __init__(self, family, loc, log_scale, weight=0.5, gauss_log_std=None):
        if family not in self.FAMILIES:
            raise ValueError(f"unknown robust family {family!r}")
        self.family = family
        self.loc = np.array(loc, dtype=np.float64)
        self.log_scale = np.array(log_scale, dtype=np.float64)
        self.n_classes, self.dim = self.loc.shape
        self.weight = float(weight)
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("mixture weight must lie in [0, 1]")
        self.mixture = family.startswith("gauss_")
        if self.mixture:
            g = np.zeros_like(self.loc) if gauss_log_std is None else gauss_log_std
            self.gauss_log_std = np.array(g, dtype=np.float64)
        else:
            self.gauss_log_std = None
        self.heavy_tailed = "cauchy" in family

    @property
    def _robust(self):
        return "cauchy" if "cauchy" in self.family else "laplace"

    def _robust_logprob(self, z):
        if self._robust == "laplace":
            return _laplace_terms(z, self.loc, self.log_scale)[0]
        return _cauchy_terms(z, self.loc, self.log_scale)[0]

    def _robust_backward(self, z, grad):
        if self._robust == "laplace":
            _, diff, inv = _laplace_terms(z, self.loc, self.log_scale)
            sgn = np.sign(diff) * inv[None]
            gz = -(grad[:, :, None] * sgn).sum(axis=1)
            g_loc = (grad[:, :, None] * sgn).sum(axis=0)
            g_ls = (grad[:, :, None] * (np.abs(diff) * inv[None] - 1.0)).sum(axis=0)
        else:
            _, u, inv = _cauchy_terms(z, self.loc, self.log_scale)
            d = 2.0 * u / (1.0 + u**2)
            gz = -(grad[:, :, None] * d * inv[None]).sum(axis=1)
            g_loc = (grad[:, :, None] * d * inv[None]).sum(axis=0)
            g_ls = (grad[:, :, None] * (u * d - 1.0)).sum(axis=0)
        return gz, g_loc, g_ls

    def _gauss(self):
        return GMMPrior(self.loc, self.gauss_log_std)

    def logprob_all(self, z):
        z = _as_batch(z)
        lr = self._robust_logprob(z)
        if not self.mixture:
            return lr
        lg = self._gauss().logprob_all(z)
        with np.errstate(divide="ignore"):
            return np.logaddexp(np.log(self.weight) + lg, np.log1p(-self.weight) + lr)

    def logprob_all_backward(self, z, grad):
        if not self.mixture:
            gz, g_loc, g_ls = self._robust_backward(z, grad)
            return gz, {"loc": g_loc, "log_scale": g_ls}
        gauss = self._gauss()
        lg = gauss.logprob_all(z)
        lr = self._robust_logprob(z)
        with np.errstate(divide="ignore"):
            a = np.log(self.weight) + lg
            b = np.log1p(-self.weight) + lr
        resp = np.exp(a - np.logaddexp(a, b))
        gz_g, gg = gauss.logprob_all_backward(z, grad * resp)
        gz_r, g_loc, g_ls = self._robust_backward(z, grad * (1.0 - resp))
        grads = {"loc": g_loc + gg["means"], "log_scale": g_ls, "gauss_log_std": gg["log_std"]}
        return gz_g + gz_r, grads

    def params(self):
        p = {"loc": self.loc, "log_scale": self.log_scale}
        if self.mixture:
            p["gauss_log_std"] = self.gauss_log_std
        return p

    def sample(self, y, n, rng):
        rng = np.random.default_rng(rng)
        y = int(_check_class(y, self.n_classes))
        scale = np.exp(self.log_scale[y])
        if self._robust == "laplace":
            robust = self.loc[y] + rng.laplace(0.0, 1.0, size=(n, self.dim)) * scale
        else:
            robust = self.loc[y] + rng.standard_cauchy(size=(n, self.dim)) * scale
        if not self.mixture:
            return robust
        gauss = self.loc[y] + rng.standard_normal((n, self.dim)) * np.exp(self.gauss_log_std[y])
        pick = rng.random(n) < self.weight
        return np.where(pick[:, None], gauss, robust)

    def to_dict(self):
        d = {"kind": self.kind, "family": self.family, "loc": self.loc.tolist(),
             "log_scale": self.log_scale.tolist(), "weight": self.weight}
        if self.mixture:
            d["gauss_log_std"] = self.gauss_log_std.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], d["loc"], d["log_scale"], d.get("weight", 0.5), d.get("gauss_log_std"))


class SmoothedPrior(Prior):
    """Label-smoothed GMM.

    The latent cluster equals the label with probability ``1 - eps`` and is
    uniform over the other ``C - 1`` clusters otherwise.
    """

    kind = "smoothed"

    def __init__(self, base: GMMPrior, eps):
        if not 0.0 <= eps < 1.0:
            raise ValueError("smoothing mass must lie in [0, 1)")
        self.base = base
        self.eps = float(eps)
        self.n_classes, self.dim = base.n_classes, base.dim
        c = self.n_classes
        with np.errstate(divide="ignore"):
            off = np.log(self.eps / (c - 1)) if c > 1 else -np.inf
            self._logw = np.full((c, c), off)
            np.fill_diagonal(self._logw, np.log1p(-self.eps))

    def _mix(self, z):
        base_lp = self.base.logprob_all(z)
        joint = base_lp[:, None, :] + self._logw[None]
        return joint, logsumexp(joint, axis=2)

    def logprob_all(self, z):
        return self._mix(_as_batch(z))[1]

    def logprob_all_backward(self, z, grad):
        joint, lp = self._mix(z)
        resp = np.exp(joint - lp[:, :, None])
        grad_base = (grad[:, :, None] * resp).sum(axis=1)
        return self.base.logprob_all_backward(z, grad_base)

    def params(self):
        return self.base.params()

    def sample(self, y, n, rng):
        rng = np.random.default_rng(rng)
        y = int(_check_class(y, self.n_classes))
        probs = np.exp(self._logw[y])
        clusters = rng.choice(self.n_classes, size=n, p=probs / probs.sum())
        out = np.empty((n, self.dim))
        for c in range(self.n_classes):
            idx = np.flatnonzero(clusters == c)
            if len(idx):
                out[idx] = self.base.sample(c, len(idx), rng)
        return out

    def to_dict(self):
        return {"kind": self.kind, "eps": self.eps, "base": self.base.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(GMMPrior.from_dict(d["base"]), d["eps"])


def split_partition(z, n_split):
    """Split ``z`` into its first ``n_split`` coordinates and the rest."""
    z = np.asarray(z, dtype=np.float64)
    dim = z.shape[-1]
    if not 0 < n_split < dim:
        raise ValueError(f"split size must satisfy 0 < D_s < D, got D_s={n_split}, D={dim}")
    return z[..., :n_split], z[..., n_split:]


class SplitPrior(Prior):
    """Factorized prior ``p(z_s | y) p(z_n | z_s, y)``.

    ``z_s`` (the first ``n_split`` latent dims) is Gaussian around the scaled
    one-hot anchor ``anchor * e_y`` with isotropic std ``cov_scale``. ``z_n``
    is Gaussian with mean and log-std produced by an MLP head fed with
    ``(z_s, onehot(y))``. Only the head is trainable.
    """

    kind = "split"

    def __init__(self, n_classes, dim, n_split=None, anchor=5.0, cov_scale=1.0,
                 hidden=(32,), rng=None, head=None):
        self.n_classes = int(n_classes)
        self.dim = int(dim)
        self.n_split = self.n_classes if n_split is None else int(n_split)
        if not 0 < self.n_split < self.dim:
            raise ValueError("split prior needs 0 < D_s < D")
        if self.n_split < self.n_classes:
            raise ValueError("one-hot anchors need D_s >= C")
        if cov_scale <= 0:
            raise ValueError("covariance scale must be positive")
        self.anchor = float(anchor)
        self.cov_scale = float(cov_scale)
        self.n_rest = self.dim - self.n_split
        if head is None:
            head = MLPNet((self.n_split + self.n_classes, *hidden, 2 * self.n_rest), rng=rng)
        self.head = head

    def anchors(self):
        a = np.zeros((self.n_classes, self.n_split))
        a[np.arange(self.n_classes), np.arange(self.n_classes)] = self.anchor
        return a

    def _head_in(self, zs, c):
        onehot = np.zeros((len(zs), self.n_classes))
        onehot[:, c] = 1.0
        return np.concatenate([zs, onehot], axis=1)

    def logprob_split_all(self, zs):
        """``log p(z_s | y=c)`` for all classes, shape ``(N, C)``."""
        zs = _as_batch(zs)
        u = (zs[:, None, :] - self.anchors()[None]) / self.cov_scale
        return -0.5 * (u**2).sum(axis=2) - self.n_split * (np.log(self.cov_scale) + 0.5 * LOG_2PI)

    def logprob_rest(self, zn, zs, c):
        """``log p(z_n | z_s, y=c)`` for one class, shape ``(N,)``."""
        zn, zs = _as_batch(zn), _as_batch(zs)
        out = self.head(self._head_in(zs, c))
        mean, log_std = out[:, : self.n_rest], out[:, self.n_rest:]
        u = (zn - mean) * np.exp(-log_std)
        return -0.5 * (u**2).sum(axis=1) - log_std.sum(axis=1) - 0.5 * self.n_rest * LOG_2PI

    def logprob_all(self, z):
        zs, zn = split_partition(_as_batch(z), self.n_split)
        out = self.logprob_split_all(zs)
        for c in range(self.n_classes):
            out[:, c] += self.logprob_rest(zn, zs, c)
        return out

    def logprob_all_backward(self, z, grad):
        zs, zn = split_partition(z, self.n_split)
        u = (zs[:, None, :] - self.anchors()[None]) / self.cov_scale
        g_zs = -(grad[:, :, None] * u).sum(axis=1) / self.cov_scale
        g_zn = np.zeros_like(zn)
        head_grads = {k: np.zeros_like(v) for k, v in self.head.params().items()}
        for c in range(self.n_classes):
            g = grad[:, c : c + 1]
            out, hidden = self.head.forward(self._head_in(zs, c))
            mean, log_std = out[:, : self.n_rest], out[:, self.n_rest:]
            inv = np.exp(-log_std)
            v = (zn - mean) * inv
            g_zn -= g * v * inv
            g_out = np.concatenate([g * v * inv, g * (v**2 - 1.0)], axis=1)
            g_in, hg = self.head.backward(hidden, g_out)
            g_zs += g_in[:, : self.n_split]
            for k in head_grads:
                head_grads[k] += hg[k]
        return np.concatenate([g_zs, g_zn], axis=1), {f"head.{k}": v for k, v in head_grads.items()}

    def params(self):
        return {f"head.{k}": v for k, v in self.head.params().items()}

    def sample(self, y, n, rng):
        rng = np.random.default_rng(rng)
        y = int(_check_class(y, self.n_classes))
        zs = self.anchors()[y] + self.cov_scale * rng.standard_normal((n, self.n_split))
        out = self.head(self._head_in(zs, y))
        mean, log_std = out[:, : self.n_rest], out[:, self.n_rest:]
        zn = mean + np.exp(log_std) * rng.standard_normal((n, self.n_rest))
        return np.concatenate([zs, zn], axis=1)

    def to_dict(self):
        return {"kind": self.kind, "n_classes": self.n_classes, "dim": self.dim,
                "n_split": self.n_split, "anchor": self.anchor, "cov_scale": self.cov_scale,
                "head": self.head.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_classes"], d["dim"], d["n_split"], d["anchor"], d["cov_scale"],
                   head=MLPNet.from_dict(d["head"]))


PRIOR_KINDS = {cls.kind: cls for cls in (GMMPrior, RobustPrior, SmoothedPrior, SplitPrior)}


def prior_from_dict(d):
    try:
        cls = PRIOR_KINDS[d["kind"]]
    except KeyError:
        raise ValueError(f"unknown prior kind {d.get('kind')!r}") from None
    return cls.from_dict(d)


def prior_logprob(prior, z, y):
    return prior.logprob(z, y)


def prior_sample(prior, y, rng, n=1):
    return prior.sample(y, n, rng)
