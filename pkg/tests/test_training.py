import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

from conftest import small_model
from flowlab.datagen import make_blobs
from flowlab.flowcore import build_flow
from flowlab.priors import GMMPrior
from flowlab.training import (DetectionThreshold, ObjectiveSpec, TrainConfig, bits_per_dim,
                              calibrate_threshold, classify, detect_outlier, joint_nll,
                              per_example_nll, required_logit_gap, reweighted_loss, train,
                              write_metrics_csv)


@pytest.fixture(scope="module")
def blobs_model():
    ds = make_blobs(2, 2, 6.0, 1.0, 3000, 0).split(0.3, 1)
    model = build_flow(2, 2, n_steps=3, hidden=(16,), seed=0)
    model, hist = train(model, ds.train.x, ds.train.y, ObjectiveSpec("reweighted"),
                        TrainConfig(epochs=30, batch_size=128, seed=0), ds.test.x, ds.test.y)
    return model, ds, hist


# --- objectives --------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_decomposition_identity(seed, n):
    m = small_model(dim=3, n_classes=3, seed=seed % 50)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    y = rng.integers(0, 3, n)
    total, gen, disc = joint_nll(m, x, y)
    assert abs(total - (gen + disc)) < 1e-10


def symmetric_model(dim, n_classes):
    m = small_model(dim=dim, n_classes=n_classes)
    m.prior.means[:] = 0.0
    m.prior.log_std[:] = 0.0
    return m


def test_symmetric_classes_give_log_c_discriminative_term():
    m = symmetric_model(3, 4)
    x = np.random.default_rng(0).normal(size=(20, 3))
    _, _, disc = joint_nll(m, x, np.arange(20) % 4)
    assert disc == pytest.approx(math.log(4), abs=1e-12)


def test_single_example_joint_nll_matches_direct_evaluation():
    m = small_model(dim=3, n_classes=3)
    x = np.array([[0.3, -0.2, 1.1]])
    L = m.class_log_likelihoods(x)[0]
    total, gen, _ = joint_nll(m, x, [2])
    assert total == pytest.approx(-(L[2] + m.log_py[2]), abs=1e-12)
    assert gen == pytest.approx(-logsumexp(L + m.log_py), abs=1e-12)


def test_duplicated_batch_same_means():
    m = small_model(dim=3, n_classes=3)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(5, 3)), rng.integers(0, 3, 5)
    a = joint_nll(m, x, y)
    b = joint_nll(m, np.concatenate([x, x]), np.concatenate([y, y]))
    np.testing.assert_allclose(a, b, rtol=1e-13)
    assert reweighted_loss(m, x, y) == pytest.approx(reweighted_loss(m, np.tile(x, (2, 1)),
                                                                     np.tile(y, 2)), rel=1e-13)


def test_reweighted_recomposes_from_independent_terms():
    m = small_model(dim=4, n_classes=3)
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(9, 4)), rng.integers(0, 3, 9)
    L = m.class_log_likelihoods(x)
    post = classify(m, x)
    want = np.mean(-L[np.arange(9), y] / 4 - np.log(post[np.arange(9), y]))
    assert reweighted_loss(m, x, y) == pytest.approx(want, rel=1e-12)
    assert reweighted_loss(m, x, y, weight=0.0) == pytest.approx(
        np.mean(-L[np.arange(9), y] / 4), rel=1e-12)


def test_reweighted_confident_classifier_keeps_only_generative_part():
    # classes far apart: posterior of the true class is 1 to double precision
    m = small_model(dim=2, n_classes=2)
    m.prior.means[:] = [[0.0, 0.0], [200.0, 0.0]]
    m.prior.log_std[:] = 0.0
    x, y = m.inverse(np.array([[0.1, 0.0], [199.5, 0.2]])), np.array([0, 1])
    L = m.class_log_likelihoods(x)
    assert np.all(classify(m, x)[[0, 1], y] == 1.0)
    want = np.mean(-L[[0, 1], y] / 2)
    assert reweighted_loss(m, x, y) == pytest.approx(want, rel=1e-12)


def test_reweighted_unit_dimension_leaves_generative_part_unscaled():
    from flowlab.objectives import objective_value_and_grad
    L = np.array([[-1.0, -50.0], [-60.0, -2.0]])
    v, _ = objective_value_and_grad(ObjectiveSpec("reweighted", 0.0), L, np.array([0, 1]),
                                    np.log([0.5, 0.5]), 1)
    assert v == pytest.approx(1.5, abs=1e-15)


def test_objective_validation():
    with pytest.raises(ValueError):
        ObjectiveSpec("hinge")
    with pytest.raises(ValueError):
        ObjectiveSpec("reweighted", -1.0)


# --- classification ----------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-1e3, 1e3))
def test_posterior_validity_and_shift_invariance(seed, shift):
    m = small_model(dim=3, n_classes=4, seed=seed % 20)
    x = np.random.default_rng(seed).normal(size=(6, 3))
    post = classify(m, x)
    assert np.all(post >= 0)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
    L = m.class_log_likelihoods(x)
    assert np.array_equal(np.argmax(L + m.log_py, axis=1), np.argmax(L + shift + m.log_py, axis=1))


def test_identical_likelihoods_give_uniform_posterior():
    m = symmetric_model(2, 5)
    np.testing.assert_allclose(classify(m, np.ones((3, 2))), 0.2, atol=1e-15)


def test_two_class_posterior_is_logistic_in_margin():
    g = 1.7
    m = small_model(dim=2, n_classes=2)
    m.prior.means[:] = [[0.0, 0.0], [1.0, 0.0]]
    m.prior.log_std[:] = 0.0
    # unit Gaussians at 0 and e1: L0 - L1 = 0.5 - z1
    x = m.inverse(np.array([[0.5 - g, 0.7]]))
    L = m.class_log_likelihoods(x)[0]
    assert L[0] - L[1] == pytest.approx(g, abs=1e-9)
    assert classify(m, x)[0, 0] == pytest.approx(1 / (1 + math.exp(-g)), abs=1e-9)


def test_required_logit_gap_examples():
    assert required_logit_gap(10, 1e-5, base=10) == pytest.approx(6.0, abs=1e-4)
    assert required_logit_gap(10, 1e-5) == pytest.approx(13.815, abs=1e-3)
    assert required_logit_gap(2, 0.5) == pytest.approx(math.log(2), abs=1e-15)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            required_logit_gap(3, bad)
    with pytest.raises(ValueError):
        required_logit_gap(1, 0.1)


def top_posterior(c, margin):
    logits = np.zeros(c)
    logits[0] = margin
    return np.exp(logits[0] - logsumexp(logits))


@settings(max_examples=50, deadline=None)
@given(c=st.integers(2, 50), delta=st.floats(1e-8, 0.9))
def test_gap_guarantee(c, delta):
    assert top_posterior(c, required_logit_gap(c, delta)) >= (1 - delta) * (1 - 1e-12)


@settings(max_examples=50, deadline=None)
@given(c=st.integers(2, 50), delta=st.floats(1e-8, 0.9), frac=st.floats(0.0, 0.999))
def test_margin_below_tight_gap_loses_confidence(c, delta, frac):
    # with C-1 equal runners-up the exact requirement is log(C-1) + log((1-delta)/delta);
    # the log C gap exceeds it by log(C/(C-1))
    tight = math.log(c - 1) + math.log((1 - delta) / delta)
    if tight <= 0:
        return
    assert top_posterior(c, frac * tight) < 1 - delta
    assert required_logit_gap(c, delta) - tight == pytest.approx(math.log(c / (c - 1)))


def test_bits_per_dim_examples():
    assert bits_per_dim(64 * math.log(2), 64) == pytest.approx(1.0)
    assert bits_per_dim(0.0, 5) == 0.0
    assert bits_per_dim(2 * math.log(2), 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        bits_per_dim(1.0, 0)


# --- training ----------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_unchanged():
    ds = make_blobs(2, 2, 6.0, 1.0, 200, 0)
    m = build_flow(2, 2, n_steps=2, hidden=(8,), seed=0)
    m, hist = train(m, ds.x, ds.y, ObjectiveSpec(), TrainConfig(epochs=1, lr=0.0, seed=0))
    before = {k: v.copy() for k, v in m.parameters().items()}
    m, hist = train(m, ds.x, ds.y, ObjectiveSpec(), TrainConfig(epochs=3, lr=0.0, seed=0))
    for k, v in m.parameters().items():
        np.testing.assert_array_equal(v, before[k])
    assert len({h["loss"] for h in hist}) == 1


def test_training_is_deterministic():
    ds = make_blobs(2, 2, 6.0, 1.0, 300, 0)
    runs = []
    for _ in range(2):
        m = build_flow(2, 2, n_steps=2, hidden=(8,), seed=3)
        m, hist = train(m, ds.x, ds.y, ObjectiveSpec(), TrainConfig(epochs=3, seed=5))
        runs.append((hist, m.parameters()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_dimension_mismatch_rejected():
    m = build_flow(3, 2, n_steps=1, hidden=(4,), seed=0)
    with pytest.raises(ValueError):
        train(m, np.zeros((10, 2)), np.zeros(10, int), ObjectiveSpec(), TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(lr=1e-3, decay_factor=0.1, decay_every=60).lr_at(60) == pytest.approx(1e-4)


def test_blobs_accuracy_and_loss_decrease(blobs_model):
    _, _, hist = blobs_model
    assert hist[-1]["eval_accuracy"] >= 0.99
    assert hist[-1]["loss"] <= hist[0]["loss"]


def test_metrics_csv(tmp_path, blobs_model):
    _, _, hist = blobs_model
    path = tmp_path / "metrics.csv"
    write_metrics_csv(hist, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# schema=metrics version=1"
    assert lines[1] == "epoch,loss,generative_term,discriminative_term,accuracy,bits_per_dim"
    assert len(lines) == 2 + len(hist)
    assert float(lines[-1].split(",")[1]) == hist[-1]["loss"]


# --- detection threshold -----------------------------------------------------

def test_threshold_quantile_must_be_open_interval(blobs_model):
    model, ds, _ = blobs_model
    for q in (0.0, 1.0):
        with pytest.raises(ValueError):
            calibrate_threshold(model, ds.x[:10], q)
    with pytest.raises(ValueError):
        DetectionThreshold(math.inf, 0.5)


def test_constant_nll_threshold():
    prior = GMMPrior(np.zeros((2, 2)), np.zeros((2, 2)))
    m = small_model(dim=2, n_classes=2, prior=prior)
    x = np.tile([[0.4, -0.3]], (10, 1))
    thr = calibrate_threshold(m, x, 0.5)
    nll = per_example_nll(m, x)
    assert np.all(nll == thr.T)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 200), q=st.floats(0.01, 0.99), seed=st.integers(0, 100))
def test_threshold_order_statistic(n, q, seed):
    m = small_model(dim=2, n_classes=2, seed=seed % 5)
    x = np.random.default_rng(seed).normal(size=(n, 2)) * 3
    thr = calibrate_threshold(m, x, q)
    nll = per_example_nll(m, x)
    assert (nll <= thr.T).sum() == math.ceil(q * n)


def test_heldout_recall(blobs_model):
    model, ds, _ = blobs_model
    thr = calibrate_threshold(model, ds.train.x, 0.99, "train")
    recall = 1.0 - detect_outlier(model, ds.test.x, thr).mean()
    assert abs(recall - 0.99) <= 0.02


def test_detection_is_strict(blobs_model):
    model, ds, _ = blobs_model
    x = ds.x[0]
    nll = float(per_example_nll(model, x)[0])
    assert detect_outlier(model, x, DetectionThreshold(nll, 0.9)) is False
    assert detect_outlier(model, x, DetectionThreshold(nll - 1.0, 0.9)) is True


def test_far_tail_point_flagged(blobs_model):
    model, ds, _ = blobs_model
    thr = calibrate_threshold(model, ds.train.x, 0.99)
    far = np.array([100.0, 0.0])
    assert detect_outlier(model, far, thr)
