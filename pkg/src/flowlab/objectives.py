"""Training objectives expressed on the ``(N, C)`` matrix of class log-likelihoods.

``L[n, c] = log p(x_n | y=c)``. Each objective returns its batch-mean value
and ``dValue/dL``; the flow's reverse pass takes it from there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

JOINT_NLL = "joint_nll"
REWEIGHTED = "reweighted"


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = REWEIGHTED
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in (JOINT_NLL, REWEIGHTED):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("classification weight must be >= 0")


def nll_terms(L, y, log_py):
    """Per-example ``(-log p(x, y), -log p(x), -log p(y | x))``."""
    joint = L + log_py[None, :]
    log_px = logsumexp(joint, axis=1)
    log_pxy = joint[np.arange(len(y)), y]
    return -log_pxy, -log_px, -(log_pxy - log_px)


def objective_value_and_grad(spec: ObjectiveSpec, L, y, log_py, dim):
    n = len(y)
    onehot = np.zeros_like(L)
    onehot[np.arange(n), y] = 1.0
    if spec.kind == JOINT_NLL:
        value = -(L[np.arange(n), y] + log_py[y]).mean()
        return value, -onehot / n
    joint = L + log_py[None, :]
    post = softmax(joint, axis=1)
    log_post = joint[np.arange(n), y] - logsumexp(joint, axis=1)
    value = (-L[np.arange(n), y] / dim - spec.weight * log_post).mean()
    grad = (-onehot / dim - spec.weight * (onehot - post)) / n
    return value, grad
