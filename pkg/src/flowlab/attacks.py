"""Detection-aware adversarial attacks on flow classifiers.

Two attacks:

* ``gradient_attack``: Carlini-Wagner style L2 attack on the per-class
  log-likelihood logits, with an optional hinge on the detection threshold.
* ``boundary_attack``: decision-based random walk along the decision
  boundary. In detection-aware mode "detected" counts as an extra class, so the
  walk never leaves the accepted region.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .flowcore.model import FlowModel, NumericalError
from .training import DetectionThreshold

log = logging.getLogger(__name__)

GRADIENT = "gradient"
BOUNDARY = "boundary"


@dataclass
class AttackConfig:
    attack: str = GRADIENT
    budget: float = 1.5
    detect_aware: bool = True
    # gradient attack
    max_iter: int = 200
    binary_steps: int = 6
    c_min: float = 1e-3
    c_max: float = 1e3
    lr: float = 1e-2
    kappa: float = 0.0
    # boundary attack
    max_queries: int = 2000
    spherical_step: float = 0.05
    source_step: float = 0.05
    adapt_every: int = 10
    # shared
    box_min: np.ndarray | float | None = None
    box_max: np.ndarray | float | None = None
    n_samples: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.attack not in (GRADIENT, BOUNDARY):
            raise ValueError(f"unknown attack {self.attack!r}")
        if not self.budget > 0:
            raise ValueError("budget must be > 0")
        if self.max_iter < 0 or self.binary_steps < 1 or self.max_queries < 1 or self.n_samples < 1:
            raise ValueError("iteration and query limits must be positive")
        if not 0 < self.c_min <= self.c_max:
            raise ValueError("need 0 < c_min <= c_max")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    detected: bool
    norm: float
    queries: int
    log: list = field(default_factory=list)


def _box(config, x):
    lo = -np.inf if config.box_min is None else config.box_min
    hi = np.inf if config.box_max is None else config.box_max
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), x.shape[-1:])
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), x.shape[-1:])
    if np.any(lo >= hi):
        raise ValueError("box_min must be below box_max")
    return lo, hi


def _logits(model, x):
    return model.class_log_likelihoods(np.atleast_2d(x)) + model.log_py


def decide(model: FlowModel, x, threshold: DetectionThreshold | None = None):
    """Class decision; with a threshold, detected inputs get label ``C``."""
    logits = _logits(model, x)
    labels = np.argmax(logits, axis=1)
    if threshold is not None:
        nll = -logsumexp(logits, axis=1)
        labels = np.where(nll > threshold.T, model.n_classes, labels)
    return labels


def _result(model, x, x_adv, y_true, threshold, queries, steps=None):
    logits = _logits(model, x_adv[None])[0]
    nll = float(-logsumexp(logits))
    return AttackResult(
        x_adv=x_adv,
        success=bool(np.argmax(logits) != y_true),
        detected=bool(threshold is not None and nll > threshold.T),
        norm=float(np.linalg.norm(x_adv - x)),
        queries=int(queries),
        log=steps or [],
    )


def _attack_terms(model, xa, y, T, kappa, detect_aware):
    """Margin and detection hinge per row, with ``d/dL`` of ``c * (f + l_det)``'s pieces."""
    z, logdet, trace = model.forward(xa)
    L = model.prior.logprob_all(z) + logdet[:, None]
    logits = L + model.log_py
    n = len(xa)
    rows = np.arange(n)
    other = logits.copy()
    other[rows, y] = -np.inf
    j = np.argmax(other, axis=1)
    raw = logits[rows, y] - other[rows, j]
    margin = np.maximum(raw, -kappa)
    g_margin = np.zeros_like(L)
    active = raw > -kappa
    g_margin[rows[active], y[active]] = 1.0
    g_margin[rows[active], j[active]] = -1.0
    log_px = logsumexp(logits, axis=1)
    nll = -log_px
    det = np.maximum(0.0, nll - T) if detect_aware else np.zeros(n)
    g_det = np.zeros_like(L)
    if detect_aware:
        post = np.exp(logits - log_px[:, None])
        g_det[nll > T] = -post[nll > T]
    return trace, z, logits, nll, margin, det, g_margin, g_det


def gradient_attack(model: FlowModel, x, y_true, threshold: DetectionThreshold | None,
                    config: AttackConfig):
    """Minimize ``|x'-x|^2 + c f(x') [+ c l_det(x')]`` with a binary search on ``c``.

    ``f`` is the untargeted margin ``max(logit_y - max_{j!=y} logit_j, -kappa)``
    and ``l_det = max(0, -log p(x') - T)``. Inputs stay inside the box through a
    ``tanh`` change of variables. Accepts a single vector or a batch; returns
    one :class:`AttackResult` per row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y_true, dtype=np.int64))
    single = np.ndim(y_true) == 0
    lo, hi = _box(config, x)
    if config.detect_aware and threshold is None:
        raise ValueError("detection-aware attack needs a threshold")
    T = threshold.T if threshold is not None else np.inf
    labels = decide(model, x, threshold)
    if np.any(labels != y):
        raise ValueError("attack seeds must be correctly classified and below the threshold")
    n = len(x)
    finite = np.isfinite(lo) & np.isfinite(hi)
    mid = 0.5 * (np.where(finite, lo, 0.0) + np.where(finite, hi, 0.0))
    half = np.where(finite, 0.5 * (hi - lo), 1.0)

    def to_x(w):
        return np.where(finite, mid + half * np.tanh(w), w)

    w0 = np.where(finite, np.arctanh(np.clip((x - mid) / half, -1 + 1e-12, 1 - 1e-12)), x)
    c_lo = np.full(n, config.c_min)
    c_hi = np.full(n, config.c_max)
    c = np.sqrt(c_lo * c_hi)
    best_x = x.copy()
    best_norm = np.full(n, np.inf)
    queries = 0
    steps = [[] for _ in range(n)]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for bs in range(config.binary_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        alive = np.ones(n, dtype=bool)
        for it in range(config.max_iter):
            xa = to_x(w)
            try:
                trace, z, logits, nll, margin, det, g_m, g_d = _attack_terms(
                    model, xa, y, T, config.kappa, config.detect_aware)
                grad_L = c[:, None] * (g_m + g_d)
                g_x, _ = model.backward(trace, z, grad_L)
            except NumericalError as exc:
                for i in np.where(alive)[0]:
                    steps[i].append({"c": float(c[i]), "error": str(exc)})
                alive[:] = False
                break
            queries += 1
            bad = ~np.all(np.isfinite(g_x), axis=1)
            for i in np.where(bad & alive)[0]:
                steps[i].append({"c": float(c[i]), "error": "non-finite input gradient"})
            alive &= ~bad
            # bookkeeping at the current point, before the step
            pred = np.argmax(logits, axis=1)
            ok = pred != y
            if config.detect_aware:
                ok &= nll <= T
            d2 = ((xa - x) ** 2).sum(axis=1)
            improve = ok & alive & (np.sqrt(d2) < best_norm)
            best_norm[improve] = np.sqrt(d2[improve])
            best_x[improve] = xa[improve]
            found |= ok & alive
            g_x = 2.0 * (xa - x) + g_x
            g_w = np.where(finite, g_x * half * (1.0 - np.tanh(w) ** 2), g_x)
            g_w[~alive] = 0.0
            t = it + 1
            m = b1 * m + (1 - b1) * g_w
            v = b2 * v + (1 - b2) * g_w * g_w
            w = w - config.lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        else:
            if config.max_iter > 0:
                xa = to_x(w)
                logits = _logits(model, xa)
                queries += 1
                ok = np.argmax(logits, axis=1) != y
                if config.detect_aware:
                    ok &= -logsumexp(logits, axis=1) <= T
                d = np.linalg.norm(xa - x, axis=1)
                improve = ok & alive & (d < best_norm)
                best_norm[improve] = d[improve]
                best_x[improve] = xa[improve]
                found |= ok & alive
        for i in range(n):
            steps[i].append({"c": float(c[i]), "found": bool(found[i]),
                             "best_norm": float(best_norm[i])})
        c_hi = np.where(found, c, c_hi)
        c_lo = np.where(found, c_lo, c)
        c = np.sqrt(c_lo * c_hi)
    results = [_result(model, x[i], best_x[i], y[i], threshold, queries, steps[i])
               for i in range(n)]
    return results[0] if single else results


def boundary_attack(model: FlowModel, x_original, y_target, init_point,
                    threshold: DetectionThreshold | None, detect_aware: bool,
                    config: AttackConfig, y_true=None):
    """Decision-based boundary attack.

    Detection-aware mode accepts a candidate only if the ``C+1``-way decision
    (with "detected" as class ``C``) equals ``y_target``. Plain mode accepts any
    class other than the true class. The perturbation norm never increases
    over accepted steps; the best point is returned when queries run out.
    """
    x0 = np.asarray(x_original, dtype=np.float64)
    init = np.asarray(init_point, dtype=np.float64)
    lo, hi = _box(config, x0)
    if detect_aware and threshold is None:
        raise ValueError("detection-aware attack needs a threshold")
    if y_true is None:
        y_true = int(decide(model, x0)[0])
    rng = np.random.default_rng(config.seed)

    def adversarial(pts):
        if detect_aware:
            return decide(model, pts, threshold) == y_target
        return decide(model, pts) != y_true

    queries = 1
    if np.array_equal(init, x0) or not adversarial(init)[0]:
        raise ValueError("invalid initialization")

    # line search from the init towards the original along the segment
    lo_a, hi_a = 0.0, 1.0
    for _ in range(10):
        mid_a = 0.5 * (lo_a + hi_a)
        queries += 1
        if adversarial(x0 + mid_a * (init - x0))[0]:
            hi_a = mid_a
        else:
            lo_a = mid_a
    adv = x0 + hi_a * (init - x0)
    dist = float(np.linalg.norm(adv - x0))
    trace = [dist]
    sph, src = config.spherical_step, config.source_step
    sph_hist, src_hist = [], []
    while queries + 2 <= config.max_queries:
        diff = x0 - adv
        d = np.linalg.norm(diff)
        unit = diff / d
        eta = rng.standard_normal(x0.shape)
        eta -= (eta @ unit) * unit
        eta *= sph * d / max(np.linalg.norm(eta), 1e-300)
        cand = adv + eta
        # back onto the sphere of radius d around the original
        cand = x0 + (cand - x0) * (d / np.linalg.norm(cand - x0))
        cand = np.clip(cand, lo, hi)
        contracted = np.clip(cand + src * (x0 - cand), lo, hi)
        ok = adversarial(np.stack([cand, contracted]))
        queries += 2
        sph_hist.append(bool(ok[0]))
        if ok[0]:
            src_hist.append(bool(ok[1]))
            new_d = float(np.linalg.norm(contracted - x0))
            if ok[1] and new_d < dist:
                adv, dist = contracted, new_d
                trace.append(dist)
        if len(sph_hist) >= config.adapt_every:
            rate = np.mean(sph_hist)
            sph = sph * 1.5 if rate > 0.5 else sph / 1.5
            sph_hist = []
        if len(src_hist) >= config.adapt_every:
            rate = np.mean(src_hist)
            src = min(src * 1.5, 0.9) if rate > 0.25 else src / 1.5
            src_hist = []
        if dist < 1e-12:
            break
    res = _result(model, x0, adv, y_true, threshold, queries)
    res.log = [{"norm": t} for t in trace]
    return res


SUITE_COLUMNS = ["attack", "detect_aware", "n", "pct_success", "pct_success_undetected",
                 "mean_norm", "mean_queries"]


def eligible_indices(model: FlowModel, x, y, threshold: DetectionThreshold):
    """Rows that are correctly classified and not flagged by the detector."""
    return np.where(decide(model, x, threshold) == np.asarray(y))[0]


def evaluate_attack_suite(model: FlowModel, x, y, threshold: DetectionThreshold, configs):
    """Run every config on the eligible rows; one summary dict per config.

    Success counts only within ``config.budget``. Boundary attacks start from a
    random eligible sample of a random other class.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ok = eligible_indices(model, x, y, threshold)
    rows = []
    for cfg in configs:
        rng = np.random.default_rng(cfg.seed)
        if cfg.box_min is None and cfg.box_max is None:
            cfg = _with_box(cfg, x.min(axis=0), x.max(axis=0))
        pick = ok[rng.permutation(len(ok))[: cfg.n_samples]] if len(ok) else ok
        results = []
        if cfg.attack == GRADIENT and len(pick):
            results = gradient_attack(model, x[pick], y[pick], threshold, cfg)
        elif cfg.attack == BOUNDARY:
            for k, i in enumerate(pick):
                others = [c for c in range(model.n_classes) if c != y[i] and np.any(y[ok] == c)]
                if not others:
                    continue
                target = int(rng.choice(others))
                pool = ok[y[ok] == target]
                start = x[int(rng.choice(pool))]
                sub = _with_seed(cfg, cfg.seed * 100003 + k)
                results.append(boundary_attack(model, x[i], target, start, threshold,
                                               cfg.detect_aware, sub, y_true=int(y[i])))
        rows.append(summarize(cfg, results))
    return rows


def summarize(cfg: AttackConfig, results):
    n = len(results)
    within = [r for r in results if r.success and r.norm <= cfg.budget]
    undet = [r for r in within if not r.detected]
    return {
        "attack": cfg.attack,
        "detect_aware": int(cfg.detect_aware),
        "n": n,
        "pct_success": 100.0 * len(within) / n if n else math.nan,
        "pct_success_undetected": 100.0 * len(undet) / n if n else math.nan,
        "mean_norm": float(np.mean([r.norm for r in within])) if within else math.nan,
        "mean_queries": float(np.mean([r.queries for r in results])) if n else math.nan,
    }


def _with_box(cfg, lo, hi):
    d = dict(cfg.__dict__)
    d.update(box_min=lo, box_max=hi)
    return AttackConfig(**d)


def _with_seed(cfg, seed):
    d = dict(cfg.__dict__)
    d["seed"] = seed
    return AttackConfig(**d)


def write_attack_csv(rows, path, extra=None):
    """Attack table CSV (``# schema=attack_table version=1`` then a header)."""
    extra = extra or {}
    cols = SUITE_COLUMNS + list(extra)
    with open(path, "w", newline="") as fh:
        fh.write("# schema=attack_table version=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            vals = [r[c] for c in SUITE_COLUMNS] + [extra[k] for k in extra]
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in vals])
