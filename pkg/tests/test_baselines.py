import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iclgd import baselines as B
from iclgd.attention import KernelSpec
from iclgd.taskgen import Context, ContextBatch

from conftest import assert_close, random_batch


def permute_labels(batch, perm):
    """Relabel class c as perm[c] (class vectors reordered to match)."""
    inv = np.argsort(perm)
    return ContextBatch(batch.class_vectors[:, inv], batch.xs, perm[batch.labels], batch.x_query,
                        perm[batch.y_query])


PREDICTORS = [
    B.BaselinePredictor("gd_step", eta=12.0),
    B.BaselinePredictor("kernel_gd", eta=40.0, sigma2=0.3),
    B.BaselinePredictor("adaptive", c_eta=5.0, c_sigma=20.0),
    B.BaselinePredictor("adaptive", c_eta=5.0, c_sigma=20.0, include_self=True),
]


def test_zero_rate_uniform(batch):
    np.testing.assert_allclose(B.gd_step_predict(batch, 0.0), 0.2)
    np.testing.assert_allclose(B.kernel_gd_predict(batch, 0.0, KernelSpec.rbf(1.0)), 0.2)
    np.testing.assert_allclose(B.adaptive_predict(batch, 0.0, 3.0), 0.2)


def test_single_aligned_sample():
    x = np.array([0.6, 0.8])
    ctx = Context(np.eye(3, 2), x[None], np.array([1]), x, 1)
    p = B.gd_step_predict(ctx, 1.0)
    np.testing.assert_allclose(p, np.exp([0, 1, 0]) / np.exp([0, 1, 0]).sum())


def test_gd_step_matches_unshifted_form(batch):
    eta, n, C = 9.0, batch.n, batch.C
    dots = np.einsum("bnd,bd->bn", batch.xs, batch.x_query)
    resid = 1.0 / C - batch.onehot()  # gradient residual at W0 = 0
    logits = -(eta / n) * np.einsum("bnc,bn->bc", resid, dots)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert_close(B.gd_step_predict(batch, eta), p, 1e-12)


def test_dot_kernel_is_gd_step(batch):
    assert_close(B.kernel_gd_predict(batch, 5.0, KernelSpec.dot()), B.gd_step_predict(batch, 5.0), 1e-15)


def test_wide_rbf_uniform(batch):
    # kernel values are 1 - O(1/sigma2), so the deviation from uniform is O(1e-6)
    np.testing.assert_allclose(B.kernel_gd_predict(batch, 1.0, KernelSpec.rbf(1e6)), 0.2, atol=1e-6)


def test_rbf_on_sphere():
    a = np.array([0.6, 0.8])
    b = np.array([1.0, 0.0])
    assert KernelSpec.rbf(1.0)(a, b) == pytest.approx(np.exp(a @ b - 1.0), rel=1e-14)


def test_adaptive_lr_examples():
    x = np.array([0.0, 1.0])
    ctx = Context(np.eye(2), np.repeat(x[None], 4, axis=0), np.array([0, 1, 0, 1]), x, 1)
    assert B.adaptive_lr(ctx, 3.0, 0.5) == pytest.approx(3.0, rel=1e-14)
    batch = random_batch(count=4)
    np.testing.assert_allclose(B.adaptive_lr(batch, 2.0, 0.3), 2 * B.adaptive_lr(batch, 1.0, 0.3))


def test_adaptive_lr_decreases_with_near_point():
    batch = random_batch(count=8)
    n = batch.n
    before = B.adaptive_lr(batch, 1.0, 0.5)
    xs = batch.xs.copy()
    xs[:, 0] = batch.x_query  # move a point onto the query
    labels = batch.labels.copy()
    moved = ContextBatch(batch.class_vectors, xs, labels, batch.x_query, batch.y_query)
    # same n, more neighbour mass (x_0 was not already at the query)
    assert np.all(B.adaptive_lr(moved, 1.0, 0.5) < before)
    assert moved.n == n


def test_adaptive_equals_kernel_gd_chain(batch):
    c_eta, c_sigma = 4.0, 15.0
    s2 = B.sigma2_from_c_sigma(c_sigma, batch.d, batch.C)
    eta = B.adaptive_lr(batch, c_eta, s2)
    assert_close(B.adaptive_predict(batch, c_eta, c_sigma),
                 B.kernel_gd_predict(batch, eta, KernelSpec.rbf(s2)), 1e-12)


def test_adaptive_zero_width_uniform_attention(batch):
    w = B.adaptive_weights(batch, 0.0)
    np.testing.assert_allclose(w, 1.0 / batch.n)
    p = B.adaptive_predict(batch, 2.0, 0.0)
    np.testing.assert_allclose(p, 0.2, atol=1e-15)  # balanced classes


@pytest.mark.parametrize("pred", PREDICTORS, ids=lambda p: p.variant)
def test_label_permutation_equivariance(pred, batch):
    perm = np.array([3, 0, 4, 1, 2])
    p = pred(batch)
    q = pred(permute_labels(batch, perm))
    assert_close(q[:, perm], p, 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 300.0))
def test_gd_argmax_invariant_to_rate(eta):
    batch = random_batch(count=32, seed=3)
    assert np.array_equal(np.argmax(B.gd_step_predict(batch, eta), axis=1),
                          np.argmax(B.gd_step_predict(batch, 1.0), axis=1))


def test_predictor_validation():
    with pytest.raises(ValueError):
        B.BaselinePredictor("gd_step")
    with pytest.raises(ValueError):
        B.BaselinePredictor("kernel_gd", eta=1.0, sigma2=0.0)
    with pytest.raises(ValueError):
        B.BaselinePredictor("newton", eta=1.0)
    assert B.BaselinePredictor("gd_step", eta=2.0).to_dict() == {"variant": "gd_step", "eta": 2.0,
                                                                  "include_self": False}


def test_single_and_batch_agree(batch):
    for pred in PREDICTORS:
        np.testing.assert_allclose(pred(batch[2]), pred(batch)[2], atol=1e-15)
