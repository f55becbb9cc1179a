"""Analytic counter-example: near-optimal model, undetectable confident mistakes.

Data distribution ``p`` and model ``q`` over ``x`` in ``R^d`` with two
equiprobable classes, built from uniform densities on annuli
``R(a, b) = {a <= |x| <= b}``::

    p(x|0) = l1 U(0,1) + (1-l1) U(1, 1+D)      q(x|0) = U(0, 1+D)
    p(x|1) = l2 U(0,1) + (1-l2) U(2, 3)        q(x|1) = p(x|1)

Radii and volumes are handled in log space; ``d`` reaches the hundreds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, logsumexp
from scipy.stats import binomtest

ETA = 1e-6


@dataclass(frozen=True)
class AnnulusSpec:
    a: float
    b: float
    dim: int

    def __post_init__(self):
        if not (self.b > self.a >= 0):
            raise ValueError(f"annulus needs b > a >= 0, got a={self.a}, b={self.b}")
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")

    def log_volume(self):
        """``log(C_d (b^d - a^d))`` with ``C_d`` the unit-ball volume."""
        d = self.dim
        log_cd = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0)
        if self.a == 0:
            return log_cd + d * math.log(self.b)
        return log_cd + d * math.log(self.b) + math.log(-math.expm1(d * math.log(self.a / self.b)))


@dataclass(frozen=True)
class CounterexampleParams:
    lam1: float
    lam2: float
    delta_r: float
    dim: int
    eps: float = 0.1
    delta: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.lam1 <= 1.0 and 0.0 <= self.lam2 <= 1.0):
            raise ValueError("mixture weights must lie in [0, 1]")
        if self.delta_r <= 0 or self.dim < 1 or self.eps <= 0:
            raise ValueError("need radius gap > 0, dim >= 1, eps > 0")
        if not 0.0 < self.delta < 0.5:
            raise ValueError("confidence slack must lie in (0, 1/2)")

    @property
    def log_v(self):
        """``d log(1 + Delta)``, the log volume ratio of the two balls."""
        return self.dim * math.log1p(self.delta_r)


def annulus_log_density(spec: AnnulusSpec, x):
    """Uniform log-density on the annulus; ``-inf`` outside its support."""
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1)
    return annulus_log_density_radius(spec, r)


def annulus_log_density_radius(spec: AnnulusSpec, r):
    r = np.asarray(r, dtype=np.float64)
    inside = (r >= spec.a) & (r <= spec.b)
    return np.where(inside, -spec.log_volume(), -np.inf)


def sample_annulus_radius(spec: AnnulusSpec, n, rng):
    """Radii of uniform annulus samples, ``r^d ~ U(a^d, b^d)`` (log space)."""
    rng = np.random.default_rng(rng)
    u = rng.random(n)
    d = spec.dim
    if spec.a == 0:
        log_rd = d * math.log(spec.b) + np.log(u)
    else:
        with np.errstate(divide="ignore"):
            log_rd = np.logaddexp(d * math.log(spec.a) + np.log1p(-u), d * math.log(spec.b) + np.log(u))
    r = np.exp(log_rd / d)
    return np.clip(r, spec.a, spec.b)


def sample_annulus(spec: AnnulusSpec, n, rng):
    """``n`` i.i.d. uniform points on the annulus, shape ``(n, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng)
    g = rng.standard_normal((n, spec.dim))
    norms = np.linalg.norm(g, axis=1)
    while np.any(norms == 0):  # measure-zero, but keep directions defined
        bad = norms == 0
        g[bad] = rng.standard_normal((int(bad.sum()), spec.dim))
        norms = np.linalg.norm(g, axis=1)
    r = sample_annulus_radius(spec, n, rng)
    return g * (r / norms)[:, None]


# mixture components of the four class conditionals, as (weight, AnnulusSpec)

def _components(params: CounterexampleParams, which):
    d, D = params.dim, params.delta_r
    inner = AnnulusSpec(0.0, 1.0, d)
    if which == "p0":
        return [(params.lam1, inner), (1.0 - params.lam1, AnnulusSpec(1.0, 1.0 + D, d))]
    if which == "q0":
        return [(1.0, AnnulusSpec(0.0, 1.0 + D, d))]
    if which in ("p1", "q1"):
        return [(params.lam2, inner), (1.0 - params.lam2, AnnulusSpec(2.0, 3.0, d))]
    raise ValueError(which)


def mixture_log_density_radius(params, which, r):
    """``log p(x|y)`` or ``log q(x|y)`` (``which`` in p0, p1, q0, q1) from radii."""
    r = np.asarray(r, dtype=np.float64)
    terms = []
    for w, spec in _components(params, which):
        if w > 0:
            terms.append(math.log(w) + annulus_log_density_radius(spec, r))
    if not terms:
        return np.full(r.shape, -np.inf)
    return logsumexp(np.stack(terms), axis=0)


def class_log_densities(params, model, x=None, r=None):
    """``(N, 2)`` log class-conditionals of ``model`` ('p' or 'q') at points or radii."""
    if r is None:
        r = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    return np.stack([mixture_log_density_radius(params, model + "0", r),
                     mixture_log_density_radius(params, model + "1", r)], axis=-1)


def posteriors_from_densities(params, model, x=None, r=None):
    """Bayes' rule from raw densities (equal class priors); shape ``(N, 2)``."""
    lp = class_log_densities(params, model, x, r)
    with np.errstate(invalid="ignore"):
        return np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))


def posteriors_in_unit_ball(params: CounterexampleParams):
    """Closed-form class-0 posteriors of ``p`` and ``q`` inside the unit ball."""
    if params.lam1 == 0 and params.lam2 == 0:
        raise ValueError("posterior undefined: no mass of either class in the unit ball")
    p_post = params.lam1 / (params.lam1 + params.lam2)
    if params.lam2 == 0:
        return p_post, 1.0
    q_post = float(expit(-(math.log(params.lam2) + params.log_v)))
    return p_post, q_post


def kl_q_p(params: CounterexampleParams):
    """``KL(q(x|0) || p(x|0))`` in closed form.

    The class-1 conditionals and label marginals coincide, so this is the
    only non-zero term of the chain-rule decomposition.
    """
    l1, lv = params.lam1, params.log_v
    if l1 <= 0.0 or l1 >= 1.0:
        return math.inf
    inv_v = math.exp(-lv)
    shell = -math.expm1(-lv)  # 1 - 1/V
    return -(math.log(l1) + lv) * inv_v + shell * (math.log(shell) - math.log1p(-l1))


def kl_p_q(params: CounterexampleParams):
    """``KL(p(x|0) || q(x|0))`` in closed form."""
    l1, lv = params.lam1, params.log_v
    shell = -math.expm1(-lv)
    ball = 0.0 if l1 == 0.0 else l1 * (math.log(l1) + lv)
    rest = 0.0 if l1 == 1.0 else (1.0 - l1) * (math.log1p(-l1) - math.log(shell))
    return ball + rest


def _region_proposal(params):
    d, D = params.dim, params.delta_r
    return [(0.5, AnnulusSpec(0.0, 1.0, d)), (0.5, AnnulusSpec(1.0, 1.0 + D, d))]


def _sample_mixture_radius(comps, n, rng):
    weights = np.array([w for w, _ in comps])
    which = rng.choice(len(comps), size=n, p=weights / weights.sum())
    r = np.empty(n)
    for k, (_, spec) in enumerate(comps):
        idx = np.flatnonzero(which == k)
        if len(idx):
            r[idx] = sample_annulus_radius(spec, len(idx), rng)
    return r


def _mixture_log_density(comps, r):
    terms = [math.log(w) + annulus_log_density_radius(s, r) for w, s in comps if w > 0]
    return logsumexp(np.stack(terms), axis=0)


def mc_kl(params: CounterexampleParams, direction, n, rng, scheme="regions", chunk=250_000):
    """Monte-Carlo ``KL`` between the class-0 conditionals.

    ``direction`` is ``"q_p"`` for ``KL(q||p)`` or ``"p_q"`` for ``KL(p||q)``.
    With ``scheme="regions"`` (default) points are drawn from an equal-weight
    mixture of the uniform ball ``R(0,1)`` and shell ``R(1,1+Delta)`` and
    importance-weighted; the ball keeps half the samples even when the first
    argument gives it mass ``(1+Delta)^-d``. ``scheme="direct"`` samples the
    first argument itself. Only radii are drawn; all densities are radial.

    Returns ``(estimate, standard_error)``; a support violation gives
    ``(inf, inf)``.
    """
    if n < 1000:
        raise ValueError("need at least 1000 samples")
    if direction not in ("q_p", "p_q"):
        raise ValueError("direction must be 'q_p' or 'p_q'")
    if scheme not in ("regions", "direct"):
        raise ValueError("scheme must be 'regions' or 'direct'")
    rng = np.random.default_rng(rng)
    first, second = ("q", "p") if direction == "q_p" else ("p", "q")
    proposal = _region_proposal(params) if scheme == "regions" else _components(params, first + "0")
    vals = np.empty(n)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        r = _sample_mixture_radius(proposal, m, rng)
        log_f = mixture_log_density_radius(params, first + "0", r)
        log_g = mixture_log_density_radius(params, second + "0", r)
        live = np.isfinite(log_f)
        if np.any(live & ~np.isfinite(log_g)):
            return math.inf, math.inf
        v = np.zeros(m)
        log_w = log_f[live] - _mixture_log_density(proposal, r[live])
        v[live] = np.exp(log_w) * (log_f[live] - log_g[live])
        vals[done:done + m] = v
        done += m
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


@dataclass
class DimensionSolution:
    dim: int
    lam1_low: float
    lam1_high: float
    lam1: float
    lam2: float
    conditions: dict
    params: CounterexampleParams


def lambda_interval(eps, delta, delta_r, dim):
    """Open interval of admissible ``lam1`` at dimension ``dim`` (may be empty).

    The upper end is ``min(eps/2, eps/(d log(1+Delta)))``, further capped at
    ``1 - exp(-eps)`` so that very loose ``eps`` (above about 1.59) still gives
    a valid mixture weight.
    """
    log_low = 2.0 * (math.log1p(-delta) - math.log(delta)) - dim * math.log1p(delta_r)
    high = min(eps / 2.0, eps / (dim * math.log1p(delta_r)), -math.expm1(-eps))
    return math.exp(log_low), high


def proof_conditions(params: CounterexampleParams, rtol=1e-12):
    """The five sufficient conditions on ``(lam1, lam2, d)``, each as a bool.

    ``rtol`` absorbs round-off where the construction makes a condition hold
    with equality (``lam2 = lam1 delta / (1 - delta)`` gives
    ``p(0|x) = 1 - delta`` exactly).
    """
    l1, dl = params.lam1, params.delta
    p_post, q_post = posteriors_in_unit_ball(params)
    return {
        1: p_post >= (1.0 - dl) * (1.0 - rtol),
        2: q_post <= dl,
        3: l1 <= -math.expm1(-params.eps),
        4: math.log(l1) > -params.log_v if l1 > 0 else False,
        5: l1 < params.eps / params.log_v,
    }


def solve_dimension(eps, delta, delta_r, max_dim=1_000_000):
    """Smallest ``d`` with a non-empty admissible ``lam1`` interval.

    Returns the midpoint ``lam1`` with ``lam2 = lam1 delta / (1 - delta)`` and
    the proof conditions re-evaluated on the result.
    """
    if eps <= 0 or not 0 < delta < 0.5 or delta_r <= 0:
        raise ValueError("need eps > 0, 0 < delta < 1/2, Delta > 0")
    for d in range(1, max_dim + 1):
        low, high = lambda_interval(eps, delta, delta_r, d)
        if low < high:
            break
    else:
        raise RuntimeError(f"no admissible dimension below {max_dim}")
    lam1 = 0.5 * (low + high)
    lam2 = lam1 * delta / (1.0 - delta)
    params = CounterexampleParams(lam1, lam2, delta_r, d, eps, delta)
    return DimensionSolution(d, low, high, lam1, lam2, proof_conditions(params), params)


def construct_adversarial(x, delta_r=None, eta=ETA):
    """Radially move a shell point to just inside the unit ball.

    ``x_bar = x (1 - eta) / |x|``; the displacement is ``|x| - 1 + eta``.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    if delta_r is not None:
        if np.any(r < 1.0) or np.any(r > 1.0 + delta_r):
            raise ValueError("input must lie in the shell 1 <= |x| <= 1 + Delta")
    return x * ((1.0 - eta) / r)


def wilson_interval(k, n, confidence=0.95):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class PropositionReport:
    params: CounterexampleParams
    n_samples: int
    n_attacked: int
    fraction: float
    ci_low: float
    ci_high: float
    median_q: float
    condition_rates: dict = field(default_factory=dict)
    ball_mass_max: float = float("nan")
    passed: bool = False
    feasible: bool = True
    attacked_index: np.ndarray | None = None
    x: np.ndarray | None = None
    x_bar: np.ndarray | None = None


def _log_marginal(params, model, r):
    return logsumexp(class_log_densities(params, model, r=r), axis=-1) + math.log(0.5)


def check_point(params: CounterexampleParams, x, x_bar, log_median_q, eta=ETA):
    """The five sufficient conditions for one ``(x, x_bar)`` pair, from raw densities."""
    pp = posteriors_from_densities(params, "p", x=np.stack([x, x_bar]))
    qp = posteriors_from_densities(params, "q", x=np.stack([x, x_bar]))
    dl = params.delta
    slack = 1e-12
    y_p, y_q = int(np.argmax(pp[0])), int(np.argmax(qp[0]))
    y_true_bar = int(np.argmax(pp[1]))
    r_bar = np.linalg.norm(x_bar)
    return {
        1: y_p == y_q and pp[0, y_p] >= 1 - dl and qp[0, y_q] >= 1 - dl,
        2: y_true_bar == y_p and int(np.argmax(qp[1])) != y_true_bar,
        3: qp[1, y_true_bar] <= dl and pp[1, y_true_bar] >= (1 - dl) * (1 - slack),
        4: np.linalg.norm(x - x_bar) <= params.delta_r + eta,
        5: float(_log_marginal(params, "q", np.array([r_bar]))[0]) >= log_median_q,
    }


def sample_joint(params: CounterexampleParams, n, rng):
    """``(x, y)`` from the data distribution ``p``."""
    rng = np.random.default_rng(rng)
    y = (rng.random(n) < 0.5).astype(np.int64)
    x = np.empty((n, params.dim))
    for cls in (0, 1):
        comps = _components(params, f"p{cls}")
        idx = np.flatnonzero(y == cls)
        weights = np.array([w for w, _ in comps])
        which = rng.choice(len(comps), size=len(idx), p=weights / weights.sum())
        for k, (_, spec) in enumerate(comps):
            sub = idx[which == k]
            if len(sub):
                x[sub] = sample_annulus(spec, len(sub), rng)
    return x, y


def ball_mass_estimate(params, x, n_centers=64, radius=None):
    """Largest empirical p-mass found in a ball of radius ``Delta``.

    Centres are the origin plus ``n_centers - 1`` sample points; each centre
    is excluded from its own count.
    """
    radius = params.delta_r if radius is None else radius
    centers = np.vstack([np.zeros(params.dim), x[: n_centers - 1]])
    sq = (x**2).sum(axis=1)
    best = 0.0
    for i, c in enumerate(centers):
        d2 = sq - 2.0 * (x @ c) + float(c @ c)
        count = int((d2 <= radius**2).sum()) - (1 if i > 0 else 0)
        best = max(best, count / len(x))
    return best


def verify_proposition(params: CounterexampleParams, n_samples, rng, keep_points=True,
                       ball_mass_tol=0.01):
    """Empirical check that confident, undetectable attacks exist with probability > 1/3.

    A sample counts when it is class 0, lies in the shell ``R(1, 1+Delta)``,
    is confidently and correctly classified by both ``p`` and ``q``, and its
    radial adversarial point flips ``q`` confidently while ``p`` stays
    confident, within distance ``Delta + eta``, with ``q``-density at least
    the empirical median ``q``-density of the ``p``-samples.
    """
    rng = np.random.default_rng(rng)
    conds = proof_conditions(params)
    feasible = all(conds.values())
    x, y = sample_joint(params, n_samples, rng)
    r = np.linalg.norm(x, axis=1)
    log_q = _log_marginal(params, "q", r)
    log_median_q = float(np.median(log_q))

    in_shell = (y == 0) & (r >= 1.0) & (r <= 1.0 + params.delta_r)
    pp = posteriors_from_densities(params, "p", r=r)
    qp = posteriors_from_densities(params, "q", r=r)
    dl = params.delta
    y_p, y_q = np.argmax(pp, axis=1), np.argmax(qp, axis=1)
    c1 = (y_p == y_q) & (pp.max(axis=1) >= 1 - dl) & (qp.max(axis=1) >= 1 - dl) & (y_p == y)

    r_bar = np.where(r > 0, 1.0 - ETA, 0.0)  # |x_bar| for every candidate
    pp_bar = posteriors_from_densities(params, "p", r=r_bar)
    qp_bar = posteriors_from_densities(params, "q", r=r_bar)
    y_true_bar = np.argmax(pp_bar, axis=1)
    c2 = (y_true_bar == y_p) & (np.argmax(qp_bar, axis=1) != y_true_bar)
    idx = np.arange(n_samples)
    c3 = (qp_bar[idx, y_true_bar] <= dl) & (pp_bar[idx, y_true_bar] >= (1 - dl) * (1 - 1e-12))
    c4 = np.abs(r - r_bar) <= params.delta_r + ETA
    c5 = _log_marginal(params, "q", r_bar) >= log_median_q
    ok = in_shell & c1 & c2 & c3 & c4 & c5

    k = int(ok.sum())
    lo, hi = wilson_interval(k, n_samples)
    rates = {}
    base = max(int(in_shell.sum()), 1)
    for i, c in enumerate((c1, c2, c3, c4, c5), start=1):
        rates[i] = float((c & in_shell).sum()) / base
    ball = ball_mass_estimate(params, x[: min(n_samples, 20_000)])
    rates[6] = float(ball <= ball_mass_tol) if params.delta_r < 1 else float("nan")
    attacked = np.flatnonzero(ok)
    report = PropositionReport(
        params=params, n_samples=n_samples, n_attacked=k, fraction=k / n_samples,
        ci_low=lo, ci_high=hi, median_q=log_median_q, condition_rates=rates,
        ball_mass_max=ball, passed=feasible and lo > 1.0 / 3.0, feasible=feasible,
        attacked_index=attacked,
    )
    if keep_points:
        report.x = x[attacked]
        report.x_bar = construct_adversarial(report.x)
    return report
