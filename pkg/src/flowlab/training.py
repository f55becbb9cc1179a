"""Objectives, optimizer, Bayes-rule classification and detection thresholds.

Natural logarithms everywhere; other bases appear only in reporting helpers
(``bits_per_dim``, ``required_logit_gap(base=...)``).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import softmax

from .flowcore.model import FlowModel, NumericalError, _value_and_grads
from .objectives import JOINT_NLL, REWEIGHTED, ObjectiveSpec, nll_terms

log = logging.getLogger(__name__)

__all__ = [
    "JOINT_NLL", "REWEIGHTED", "ObjectiveSpec", "TrainConfig", "DetectionThreshold",
    "TrainingDivergence", "Adam", "joint_nll", "reweighted_loss", "classify",
    "required_logit_gap", "bits_per_dim", "train", "evaluate", "calibrate_threshold",
    "detect_outlier", "write_metrics_csv",
]


class TrainingDivergence(NumericalError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 100.0
    seed: int = 0
    init_batch: int = 512

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ValueError("epochs, batch_size and decay_every must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")

    def lr_at(self, epoch):
        """Step schedule; ``epoch`` counts from 0."""
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class DetectionThreshold:
    """Inputs with ``-log p(x) > T`` are flagged as outliers."""

    T: float
    quantile: float
    calibration_set: str = ""

    def __post_init__(self):
        if not 0.0 < self.quantile < 1.0:
            raise ValueError("quantile must lie in (0, 1)")
        if not math.isfinite(self.T):
            raise ValueError("threshold must be finite")


class Adam:
    """Adam over a dict of live parameter arrays, updated in place."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _clip_global(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return grads, total


def joint_nll(model: FlowModel, x, y):
    """Batch means ``(total, generative_term, discriminative_term)``.

    ``total = mean -log p(x, y)`` splits exactly into ``mean -log p(x)`` and
    ``mean -log p(y | x)``.
    """
    L = np.atleast_2d(model.class_log_likelihoods(x))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    total, gen, disc = nll_terms(L, y, model.log_py)
    return float(total.mean()), float(gen.mean()), float(disc.mean())


def reweighted_loss(model: FlowModel, x, y, weight=1.0):
    """Batch mean of ``-log p(x|y) / D - weight * log p(y|x)``."""
    L = np.atleast_2d(model.class_log_likelihoods(x))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _, _, disc = nll_terms(L, y, model.log_py)
    cond = L[np.arange(len(y)), y]
    return float((-cond / model.dim + weight * disc).mean())


def classify(model: FlowModel, x):
    """Posterior ``p(y | x)`` by Bayes' rule; rows sum to one."""
    L = model.class_log_likelihoods(x)
    return softmax(L + model.log_py, axis=-1)


def required_logit_gap(n_classes, delta, base=math.e):
    """Log-likelihood margin that forces the top posterior to at least ``1 - delta``.

    Assumes a uniform class prior: ``log C + log((1 - delta) / delta)``.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    nats = math.log(n_classes) + math.log1p(-delta) - math.log(delta)
    return nats / math.log(base)


def bits_per_dim(mean_nll_nats, dim):
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    return mean_nll_nats / (dim * math.log(2.0))


def evaluate(model: FlowModel, x, y, objective: ObjectiveSpec | None = None, chunk=4096):
    """Loss, NLL terms, accuracy and bits/dim over a whole dataset."""
    y = np.asarray(y, dtype=np.int64)
    Ls = [model.class_log_likelihoods(x[i:i + chunk]) for i in range(0, len(x), chunk)]
    L = np.concatenate(Ls, axis=0)
    total, gen, disc = nll_terms(L, y, model.log_py)
    acc = float((np.argmax(L + model.log_py, axis=1) == y).mean())
    out = {
        "generative_term": float(gen.mean()),
        "discriminative_term": float(disc.mean()),
        "joint_nll": float(total.mean()),
        "accuracy": acc,
        "bits_per_dim": bits_per_dim(float(gen.mean()), model.dim),
    }
    if objective is None or objective.kind == JOINT_NLL:
        out["loss"] = out["joint_nll"]
    else:
        cond = L[np.arange(len(y)), y]
        out["loss"] = float((-cond / model.dim + objective.weight * disc).mean())
    return out


def train(model: FlowModel, x, y, objective: ObjectiveSpec, config: TrainConfig,
          x_eval=None, y_eval=None):
    """Fit ``model`` in place with mini-batch Adam.

    Returns ``(model, history)``; ``history[0]`` holds the metrics before any
    update (epoch 0), then one row per epoch. Evaluation metrics on
    ``(x_eval, y_eval)`` are added as ``eval_*`` when given.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"data dimension {x.shape[-1]} does not match model dimension {model.dim}")
    rng = np.random.default_rng(config.seed)
    if not model.initialized:
        init_idx = rng.permutation(len(x))[: config.init_batch]
        model.initialize(x[init_idx])
    params = model.parameters()
    opt = Adam(params, config.beta1, config.beta2, config.adam_eps)

    def record(epoch):
        with np.errstate(over="ignore", invalid="ignore"):
            row = {"epoch": epoch, **evaluate(model, x, y, objective)}
            if x_eval is not None:
                for k, v in evaluate(model, x_eval, y_eval, objective).items():
                    row[f"eval_{k}"] = v
        if not math.isfinite(row["loss"]):
            raise TrainingDivergence(f"non-finite loss after epoch {epoch}", where=(epoch, None))
        return row

    history = [record(0)]
    n = len(x)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                value, grads = _value_and_grads(model, x[idx], y[idx], objective)
            except NumericalError as exc:
                raise TrainingDivergence(f"epoch {epoch + 1} step {step}: {exc}",
                                         where=(epoch + 1, step)) from exc
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch + 1} step {step}",
                                         where=(epoch + 1, step))
            grads, _ = _clip_global(grads, config.clip_norm)
            if lr > 0:
                opt.step(grads, lr)
        history.append(record(epoch + 1))
        log.debug("epoch %d: %s", epoch + 1, history[-1])
    return model, history


METRICS_COLUMNS = ["epoch", "loss", "generative_term", "discriminative_term", "accuracy",
                   "bits_per_dim"]


def write_metrics_csv(history, path):
    """Per-epoch metrics CSV (``# schema=metrics version=1`` then a header row)."""
    with open(path, "w", newline="") as fh:
        fh.write("# schema=metrics version=1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRICS_COLUMNS[1:]])


def per_example_nll(model: FlowModel, x, chunk=4096):
    """``-log p(x)`` for each row of ``x``."""
    x = np.atleast_2d(x)
    return np.concatenate([-model.log_marginal(x[i:i + chunk]) for i in range(0, len(x), chunk)])


def calibrate_threshold(model: FlowModel, x, quantile, calibration_set=""):
    """Order-statistic threshold: ``T`` is the ``ceil(q n)``-th smallest NLL."""
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must lie in the open interval (0, 1)")
    nll = np.sort(per_example_nll(model, x))
    if len(nll) == 0:
        raise ValueError("empty calibration set")
    k = max(1, math.ceil(quantile * len(nll)))
    return DetectionThreshold(float(nll[k - 1]), quantile, calibration_set)


def detect_outlier(model: FlowModel, x, threshold: DetectionThreshold):
    """``True`` where ``-log p(x) > T`` (strict)."""
    x = np.asarray(x, dtype=np.float64)
    flags = per_example_nll(model, x) > threshold.T
    return bool(flags[0]) if x.ndim == 1 else flags


def threshold_to_dict(t: DetectionThreshold):
    return asdict(t)
