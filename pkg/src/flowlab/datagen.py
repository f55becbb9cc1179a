"""Synthetic datasets: counter-example annuli, Gaussian blobs, glyphs on noisy backgrounds.

All generators are pure functions of their arguments and an RNG, so a fixed
seed reproduces a dataset bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .oracle import AnnulusSpec, CounterexampleParams, sample_annulus


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError("x must be (N, D) with one label per row")
        if np.any(self.y < 0) or np.any(self.y >= self.n_classes):
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite sample values")
        if self.train_idx is not None:
            both = np.concatenate([self.train_idx, self.test_idx])
            if not np.array_equal(np.sort(both), np.arange(len(self.x))):
                raise ValueError("split indices must be disjoint and cover the dataset")

    @property
    def dim(self):
        return self.x.shape[1]

    def __len__(self):
        return len(self.y)

    def split(self, test_fraction, rng):
        """Attach a random train/test split; returns ``self``."""
        rng = np.random.default_rng(rng)
        order = rng.permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        self.test_idx = np.sort(order[:n_test])
        self.train_idx = np.sort(order[n_test:])
        return self

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.n_classes, dict(self.meta))

    @property
    def train(self):
        return self.subset(self.train_idx)

    @property
    def test(self):
        return self.subset(self.test_idx)


def make_annuli_dataset(params: CounterexampleParams, n, rng):
    """Samples of the counter-example data distribution.

    Class 0 mixes ``U(0,1)`` / ``U(1,1+Delta)`` with weights ``(l1, 1-l1)``;
    class 1 mixes ``U(0,1)`` / ``U(2,3)`` with ``(l2, 1-l2)``; labels are
    equiprobable.
    """
    if params.dim < 2:
        raise ValueError("annuli dataset needs d >= 2")
    rng = np.random.default_rng(rng)
    d = params.dim
    y = (rng.random(n) < 0.5).astype(np.int64)
    inner = rng.random(n) < np.where(y == 0, params.lam1, params.lam2)
    x = np.empty((n, d))
    groups = [
        ((y == 0) & inner, AnnulusSpec(0.0, 1.0, d)),
        ((y == 0) & ~inner, AnnulusSpec(1.0, 1.0 + params.delta_r, d)),
        ((y == 1) & inner, AnnulusSpec(0.0, 1.0, d)),
        ((y == 1) & ~inner, AnnulusSpec(2.0, 3.0, d)),
    ]
    for mask, spec in groups:
        k = int(mask.sum())
        if k:
            x[mask] = sample_annulus(spec, k, rng)
    meta = {"kind": "annuli", "lam1": params.lam1, "lam2": params.lam2,
            "delta_r": params.delta_r, "dim": d, "n": n}
    return Dataset(x, y, 2, meta)


def simplex_means(n_classes, dim, separation):
    """``C`` points in ``R^D`` with all pairwise distances equal to ``separation``.

    Scaled one-hot vectors ``e_c * s / sqrt(2)`` in ``R^C`` are centred and
    rotated into ``R^D`` (needs ``D >= C - 1``).
    """
    if dim < n_classes - 1:
        raise ValueError("need D >= C - 1 for an equidistant configuration")
    e = np.eye(n_classes) * (separation / math.sqrt(2.0))
    e -= e.mean(axis=0)
    # orthonormal basis of the centred simplex's (C-1)-dim span
    u, s, vt = np.linalg.svd(e, full_matrices=False)
    rank = n_classes - 1
    coords = u[:, :rank] * s[:rank]
    out = np.zeros((n_classes, dim))
    out[:, :rank] = coords
    return out


def make_blobs(n_classes, dim, separation, sigma, n, rng):
    """Isotropic Gaussian blobs at equidistant (simplex) means."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(rng)
    means = simplex_means(n_classes, dim, separation)
    y = rng.integers(0, n_classes, size=n)
    x = means[y] + sigma * rng.standard_normal((n, dim))
    meta = {"kind": "blobs", "n_classes": n_classes, "dim": dim, "separation": separation,
            "sigma": sigma, "n": n}
    return Dataset(x, y, n_classes, meta)


def _glyph(name, w, h):
    m = np.zeros((h, w), dtype=bool)
    cy, cx = h // 2, w // 2
    if name == "hbar":
        m[cy - 1:cy + 1, 1:w - 1] = True
    elif name == "vbar":
        m[1:h - 1, cx - 1:cx + 1] = True
    elif name == "cross":
        m[cy - 1:cy + 1, 1:w - 1] = True
        m[1:h - 1, cx - 1:cx + 1] = True
    elif name == "square":
        m[1:h - 1, 1:w - 1] = True
        m[2:h - 2, 2:w - 2] = False
    elif name == "diag":
        for i in range(1, min(w, h) - 1):
            m[i, i] = True
            m[i, min(i + 1, w - 2)] = True
    elif name == "corners":
        k = max(1, min(w, h) // 4)
        for r0, c0 in ((0, 0), (0, w - k), (h - k, 0), (h - k, w - k)):
            m[r0:r0 + k, c0:c0 + k] = True
    else:
        raise ValueError(f"unknown glyph {name!r}")
    return m


DEFAULT_GLYPHS = ("hbar", "vbar", "cross", "square")


@dataclass
class GlyphBGSpec:
    """Glyph-on-background image family (flattened to ``D = width * height``).

    pixel = clip(offset + intensity * mask_y
                 + amplitude * u * blur(U(0,1), blur_sigma)
                 + N(0, glyph_noise^2), 0, 1)

    ``u`` is a per-image background contrast, log-uniform on
    ``[contrast_min, 1]`` (``contrast_min = 1`` gives a fixed contrast).
    """

    width: int = 8
    height: int = 8
    glyphs: tuple = DEFAULT_GLYPHS
    intensity: float = 0.35
    glyph_noise: float = 0.01
    amplitude: float = 0.55
    blur_sigma: float = 0.0
    offset: float = 0.05
    contrast_min: float = 0.05

    def __post_init__(self):
        self.glyphs = tuple(self.glyphs)
        if self.blur_sigma < 0 or not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("need blur_sigma >= 0 and amplitude in [0, 1]")
        if not 0.0 < self.contrast_min <= 1.0:
            raise ValueError("contrast_min must lie in (0, 1]")
        masks = self.masks()
        flat = [m.ravel().tobytes() for m in masks]
        if len(set(flat)) != len(flat):
            raise ValueError("glyph masks must be pairwise distinct")

    @property
    def dim(self):
        return self.width * self.height

    def masks(self):
        return np.stack([_glyph(g, self.width, self.height) for g in self.glyphs])


def _gauss_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum(), radius


def gaussian_blur(image, sigma):
    """Separable normalized Gaussian blur with radius ``ceil(3 sigma)``.

    Borders use half-sample symmetric reflection, which keeps the image mean
    unchanged. Works on a single ``(h, w)`` image or a stack ``(..., h, w)``.
    """
    if sigma < 0:
        raise ValueError("blur bandwidth must be >= 0")
    img = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    k, radius = _gauss_kernel(sigma)
    out = img
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for j, kj in enumerate(k):
            acc += kj * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def make_glyph_bg(spec: GlyphBGSpec, n, rng):
    """Glyph images over blurred uniform-noise backgrounds, flattened row-major."""
    rng = np.random.default_rng(rng)
    masks = spec.masks().astype(np.float64)
    c = len(masks)
    y = rng.integers(0, c, size=n)
    bg = rng.random((n, spec.height, spec.width))
    bg = gaussian_blur(bg, spec.blur_sigma)
    if spec.contrast_min < 1.0:
        u = np.exp(rng.uniform(math.log(spec.contrast_min), 0.0, size=n))
        bg = bg * u[:, None, None]
    img = spec.offset + spec.intensity * masks[y] + spec.amplitude * bg
    if spec.glyph_noise > 0:
        img = img + spec.glyph_noise * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    meta = {"kind": "glyph_bg", **asdict(spec), "n": n}
    meta["glyphs"] = list(spec.glyphs)
    return Dataset(img.reshape(n, -1), y, c, meta)


def mask_correlation_classify(spec: GlyphBGSpec, x):
    """Fixed template classifier used as a reference for glyph datasets.

    Removes each image's mean and each template's mean, then picks the glyph
    template with the smallest squared residual. Insensitive to the
    per-image background level.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    masks = spec.masks().reshape(len(spec.glyphs), -1).astype(np.float64)
    centred = x - x.mean(axis=1, keepdims=True)
    templates = spec.intensity * masks
    templates = templates - templates.mean(axis=1, keepdims=True)
    d2 = ((centred[:, None, :] - templates[None]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def pad_noise(x, k, scale, rng):
    """Append ``k`` i.i.d. ``U(0, scale)`` coordinates.

    Returns ``(x_padded, log_density_correction)``. The padded point's true
    log-density equals the original one plus ``k * log(1 / scale)``.
    """
    if k < 1 or scale <= 0:
        raise ValueError("need k >= 1 and scale > 0")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    noise = scale * rng.random(x.shape[:-1] + (k,))
    return np.concatenate([x, noise], axis=-1), -k * math.log(scale)


def interpolate(x0, x1, alpha):
    """``alpha * x1 + (1 - alpha) * x0``; ``alpha`` may be a scalar or 1-D grid."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"dimension mismatch {x0.shape} vs {x1.shape}")
    a = np.asarray(alpha, dtype=np.float64)
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("alpha must lie in [0, 1]")
    if a.ndim == 0:
        return alpha * x1 + (1.0 - alpha) * x0
    return a[:, None] * x1[None] + (1.0 - a[:, None]) * x0[None]


FORMAT_HEADER = "D={dim} C={n_classes}"


def save_dataset(ds: Dataset, path, meta_path=None):
    """Plain text: ``D=<int> C=<int>`` then ``y,x_1,...,x_D`` per line.

    Generation metadata goes to a JSON sidecar (``<path>.meta.json`` by default).
    """
    with open(path, "w") as fh:
        fh.write(FORMAT_HEADER.format(dim=ds.dim, n_classes=ds.n_classes) + "\n")
        for xi, yi in zip(ds.x, ds.y):
            fh.write(str(int(yi)) + "," + ",".join(repr(float(v)) for v in xi) + "\n")
    meta_path = meta_path or str(path) + ".meta.json"
    meta = dict(ds.meta)
    if ds.train_idx is not None:
        meta["train_idx"] = ds.train_idx.tolist()
        meta["test_idx"] = ds.test_idx.tolist()
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return meta_path


def load_dataset(path, meta_path=None):
    with open(path) as fh:
        header = fh.readline().split()
        try:
            fields = dict(tok.split("=") for tok in header)
            dim, n_classes = int(fields["D"]), int(fields["C"])
        except (ValueError, KeyError):
            raise ValueError(f"bad dataset header {' '.join(header)!r}") from None
        rows = [line.strip().split(",") for line in fh if line.strip()]
    y = np.array([int(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), dim)
    meta = {}
    meta_path = meta_path or str(path) + ".meta.json"
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    train_idx = meta.pop("train_idx", None)
    test_idx = meta.pop("test_idx", None)
    ds = Dataset(x, y, n_classes, meta)
    if train_idx is not None:
        ds.train_idx = np.asarray(train_idx, dtype=np.int64)
        ds.test_idx = np.asarray(test_idx, dtype=np.int64)
    return ds
