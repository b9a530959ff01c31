import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advwt.ganmath import (
    EPS,
    GaussianStats,
    LossWeights,
    adversarial_loss,
    content_loss,
    cycle_loss,
    diversity_loss,
    kl_loss,
    pooled_features,
    selftest,
    style_reconstruction_loss,
    total_objective,
    triplet_loss,
)

vec = arrays(np.float64, 6, elements=st.floats(-10, 10))
img = arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1))


def test_default_weights():
    w = LossWeights()
    assert w.as_array().tolist() == [2.0, 1, 1, 1, 1, 1, 1]
    with pytest.raises(ValueError):
        LossWeights(lambda3=-1)


def test_style_reconstruction_examples():
    assert style_reconstruction_loss([1.0, -1.0], [0.0, 0.0]) == 1.0
    assert style_reconstruction_loss([0.3, 0.2], [0.3, 0.2]) == 0.0
    with pytest.raises(ValueError):
        style_reconstruction_loss([1.0], [1.0, 2.0])


@given(vec, vec, st.permutations(range(6)))
def test_style_reconstruction_permutation_invariant(a, b, perm):
    assert style_reconstruction_loss(a, b) == pytest.approx(style_reconstruction_loss(a[perm], b[perm]))


def test_diversity_examples():
    ones = np.ones((3, 3, 3))
    assert diversity_loss(ones, ones) == 0.0
    assert diversity_loss(np.zeros_like(ones), ones) == -1.0
    with pytest.raises(ValueError):
        diversity_loss(ones, np.ones((2, 2, 3)))


@given(img, img)
def test_diversity_symmetric_nonpositive(a, b):
    assert diversity_loss(a, b) == diversity_loss(b, a)
    assert diversity_loss(a, b) <= 0


def test_cycle_examples():
    ones = np.ones((5, 5, 3))
    assert cycle_loss(ones, ones) == 0.0
    assert cycle_loss(ones, 0.5 * ones) == 0.5


@given(img, img, img)
def test_cycle_triangle_inequality(a, b, c):
    assert cycle_loss(a, c) <= cycle_loss(a, b) + cycle_loss(b, c) + 1e-12


def test_adversarial_examples():
    assert adversarial_loss(1 - EPS, EPS) == pytest.approx(0.0, abs=1e-6)
    assert adversarial_loss(0.5, 0.5) == pytest.approx(2 * np.log(0.5))
    assert adversarial_loss(0.5, 0.5) == pytest.approx(-1.3863, abs=1e-4)
    assert np.isfinite(adversarial_loss(0.0, 1.0))


def test_adversarial_monotone():
    grid = np.linspace(0.01, 0.99, 25)
    real = [adversarial_loss(p, 0.3) for p in grid]
    fake = [adversarial_loss(0.7, p) for p in grid]
    assert np.all(np.diff(real) > 0)
    assert np.all(np.diff(fake) < 0)


def test_triplet_examples():
    a = np.zeros(4)
    n = np.array([1.0, 0, 0, 0])
    assert triplet_loss(a, a, n, 0.1) == 0.0
    assert triplet_loss(a, a, a, 0.1) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        triplet_loss(a, a, np.zeros(3))
    with pytest.raises(ValueError):
        triplet_loss(a, a, a, -0.1)


@given(vec, vec, vec, st.floats(0, 2))
def test_triplet_nonnegative(a, p, n, beta):
    assert triplet_loss(a, p, n, beta) >= 0


def test_triplet_orthogonal_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, p, n = rng.normal(size=(3, 6))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert triplet_loss(q @ a, q @ p, q @ n) == pytest.approx(triplet_loss(a, p, n), abs=1e-9)


def test_kl_examples():
    assert kl_loss(GaussianStats(np.zeros(7), np.ones(7))) == 0.0
    assert kl_loss(GaussianStats(np.ones(1), np.ones(1))) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        kl_loss(GaussianStats(np.zeros(2), np.array([1.0, 0.0])))


@given(arrays(np.float64, 4, elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(0.01, 10)))
def test_kl_nonnegative(mean, var):
    assert kl_loss(GaussianStats(mean, var)) >= -1e-12


def test_kl_gradient_zero_at_prior():
    h = 1e-4
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g = (kl_loss(GaussianStats(e, np.ones(3))) - kl_loss(GaussianStats(-e, np.ones(3)))) / (2 * h)
        assert abs(g) <= 1e-6


def test_kl_matches_sampled_estimate():
    # Monte Carlo oracle for KL(q || N(0, I)) = E_q[log q - log p]
    rng = np.random.default_rng(0)
    mean, var = np.array([0.5, -1.0]), np.array([0.4, 2.0])
    x = rng.normal(mean, np.sqrt(var), size=(400000, 2))
    log_q = -0.5 * (((x - mean) ** 2) / var + np.log(2 * np.pi * var)).sum(axis=1)
    log_p = -0.5 * (x**2 + np.log(2 * np.pi)).sum(axis=1)
    assert kl_loss(GaussianStats(mean, var)) == pytest.approx(np.mean(log_q - log_p), abs=0.01)


def test_gaussian_fit():
    codes = np.array([[0.0, 1.0], [2.0, 3.0]])
    st_ = GaussianStats.fit(codes)
    assert st_.mean.tolist() == [1.0, 2.0]
    assert st_.variance.tolist() == [1.0, 1.0]


def test_content_examples():
    x = np.random.default_rng(0).random((16, 16, 3))
    assert content_loss(x, x) == 0.0
    assert content_loss(np.zeros((16, 16, 3)), np.ones((16, 16, 3))) == pytest.approx(1.0)


def test_content_ignores_block_mean_preserving_noise():
    rng = np.random.default_rng(1)
    x = rng.random((16, 16, 3)) * 0.5 + 0.25
    noise = rng.normal(0, 0.05, size=x.shape)
    # remove each 2x2 block's grayscale mean from the noise
    gray = noise.mean(axis=2)
    block = gray.reshape(8, 2, 8, 2).mean(axis=(1, 3))
    noise -= np.repeat(np.repeat(block, 2, 0), 2, 1)[..., None]
    assert content_loss(x, x + noise) == pytest.approx(0.0, abs=1e-6)


def test_content_feature_mismatch():
    calls = iter([np.zeros(3), np.zeros(4)])
    with pytest.raises(RuntimeError):
        content_loss(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), feature_fn=lambda _: next(calls))


def test_pooled_features_shape():
    assert pooled_features(np.ones((20, 20, 3))).shape == (64,)


def test_total_objective():
    assert total_objective(np.zeros(7)) == 0.0
    assert total_objective(np.ones(7)) == 8.0
    with pytest.raises(ValueError):
        total_objective(np.ones(6))
    with pytest.raises(ValueError):
        total_objective([1, 1, 1, np.nan, 1, 1, 1])


@given(arrays(np.float64, 7, elements=st.floats(-10, 10)), arrays(np.float64, 7, elements=st.floats(-10, 10)),
       st.floats(-3, 3))
def test_total_objective_linear(a, b, c):
    assert total_objective(a + c * b) == pytest.approx(total_objective(a) + c * total_objective(b), abs=1e-8)


def test_selftest_all_pass():
    rows = selftest()
    assert len(rows) >= 10
    assert all(ok for *_, ok in rows)
