import numpy as np
import pytest

from flowlab.flowcore import build_flow
from flowlab.objectives import objective_value_and_grad


def randomize(model, seed=0, scale=0.3):
    """Perturb every parameter in place so no layer is the identity."""
    rng = np.random.default_rng(seed)
    for arr in model.parameters().values():
        arr += scale * rng.standard_normal(arr.shape)
    return model


def small_model(dim=4, n_classes=3, n_steps=2, mixing="lu", prior=None, seed=0, hidden=(8,)):
    m = build_flow(dim, n_classes, n_steps=n_steps, hidden=hidden, mixing=mixing, prior=prior,
                   seed=seed)
    rng = np.random.default_rng(seed + 1)
    m.initialize(rng.normal(size=(64, dim)))
    return randomize(m, seed + 2)


def objective_value(model, x, y, spec):
    L = model.class_log_likelihoods(x)
    v, _ = objective_value_and_grad(spec, L, y, model.log_py, model.dim)
    return v


def fd_max_rel_error(model, x, y, spec, grads, h=1e-5, max_entries=40, seed=0):
    """Largest relative error between ``grads`` and central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in model.parameters().items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        g = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = objective_value(model, x, y, spec)
            flat[i] = old - h
            dn = objective_value(model, x, y, spec)
            flat[i] = old
            num = (up - dn) / (2 * h)
            err = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6)
            worst = max(worst, err)
    return worst


def numerical_jacobian(f, x, h=1e-6):
    d = len(x)
    J = np.zeros((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        J[:, i] = (f(x + e) - f(x - e)) / (2 * h)
    return J


def grid_integral(model, y, lim=6.0, n=301):
    """Midpoint-rule integral of ``p(x | y)`` over a square 2-D grid."""
    g = np.linspace(-lim, lim, n)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    dens = np.exp(model.log_likelihood(pts, np.full(len(pts), y)))
    h = g[1] - g[0]
    return dens.sum() * h * h


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
