import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mummi import diffmath as dm
from mummi.distributions import (STD_MIN, DiagGaussian, from_raw, kl_divergence, log_prob, poe_fuse,
                                 poe_fuse_guarded, sample_reparam)


def g(mean, std):
    return DiagGaussian(np.asarray(mean, float), np.asarray(std, float))


def test_sample_reparam_examples():
    np.testing.assert_array_equal(sample_reparam(g([0, 0], [1, 1]), [0, 0]).data, [0, 0])
    np.testing.assert_array_equal(sample_reparam(g([1], [2]), [1.5]).data, [4.0])


def test_sample_moments_monte_carlo():
    noise = np.random.default_rng(0).standard_normal((10**6, 1))
    s = sample_reparam(g([1.0], [2.0]), noise).data[:, 0]
    se_mean = 2.0 / np.sqrt(s.size)
    se_std = 2.0 / np.sqrt(2 * s.size)
    assert abs(s.mean() - 1.0) < 3 * se_mean
    assert abs(s.std() - 2.0) < 3 * se_std


def test_log_prob_examples():
    assert log_prob(g([0], [1]), [0.0]).item() == pytest.approx(-0.9189385332, abs=1e-9)
    assert log_prob(g([0], [1]), [1.0]).item() == pytest.approx(-1.4189385332, abs=1e-9)


def test_log_prob_matches_quadrature_normalised_density():
    # log density at [1, 1] of N([0,0], diag [1, 2]^2), normalising the unnormalised density on a grid
    xs = np.linspace(-12, 12, 2401)
    ys = np.linspace(-20, 20, 4001)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    unnorm = np.exp(-0.5 * (X**2 + (Y / 2) ** 2))
    Z = np.trapezoid(np.trapezoid(unnorm, ys, axis=1), xs)
    expected = -0.5 * (1 + 0.25) - np.log(Z)
    assert log_prob(g([0, 0], [1, 2]), [1.0, 1.0]).item() == pytest.approx(expected, abs=1e-8)


def test_kl_examples():
    assert kl_divergence(g([0], [1]), g([0], [1])).item() == 0.0
    assert kl_divergence(g([1], [1]), g([0], [1])).item() == pytest.approx(0.5, abs=1e-12)
    assert kl_divergence(g([0], [2]), g([0], [1])).item() == pytest.approx(0.5 * (4 - 1 - np.log(4)), abs=1e-12)


@pytest.mark.parametrize("q,p,expected", [(([1], [1]), ([0], [1]), 0.5),
                                          (([0], [2]), ([0], [1]), 0.5 * (4 - 1 - np.log(4)))])
def test_kl_examples_monte_carlo(q, p, expected):
    qd, pd = g(*q), g(*p)
    x = sample_reparam(qd, np.random.default_rng(1).standard_normal((10**6, 1)))
    samples = log_prob(qd, x).data - log_prob(pd, x).data
    assert abs(samples.mean() - expected) < 3 * samples.std() / np.sqrt(samples.size)


def test_std_floor_from_raw():
    raw = dm.Tensor(np.concatenate([np.zeros((3, 2)), np.full((3, 2), -50.0)], axis=-1))
    d = from_raw(raw)
    assert np.all(d.std.data >= STD_MIN)
    assert d.mean.shape == d.std.shape == (3, 2)


def test_shape_errors():
    with pytest.raises(dm.ShapeError):
        DiagGaussian(np.zeros(2), np.ones(3))
    with pytest.raises(dm.ShapeError):
        log_prob(g([0, 0], [1, 1]), [1.0])
    with pytest.raises(dm.ShapeError):
        kl_divergence(g([0], [1]), g([0, 0], [1, 1]))
    with pytest.raises(dm.ShapeError):
        poe_fuse([g([0], [1]), g([0, 0], [1, 1])])


def test_poe_examples():
    out = poe_fuse([g([0], [1]), g([0], [1])])
    assert out.mean.item() == 0.0 and out.variance.item() == pytest.approx(0.5)
    out = poe_fuse([g([0], [1]), g([2], [1])])
    assert out.mean.item() == pytest.approx(1.0) and out.variance.item() == pytest.approx(0.5)
    single = g([0.3], [0.7])
    assert poe_fuse([single]) is single


def test_poe_empty_is_error():
    with pytest.raises(ValueError):
        poe_fuse([])
    with pytest.raises(ValueError):
        poe_fuse([g([0], [1])], masks=[np.array(False)])


def test_poe_masks_drop_experts_rowwise():
    a = g([[0.0], [0.0]], [[1.0], [1.0]])
    b = g([[2.0], [2.0]], [[1.0], [1.0]])
    out = poe_fuse([a, b], masks=[np.array([True, True]), np.array([True, False])])
    np.testing.assert_allclose(out.mean.data[:, 0], [1.0, 0.0])
    np.testing.assert_allclose(out.variance[:, 0], [0.5, 1.0])


def test_poe_prior_expert_covers_missing_rows():
    a = g([[2.0]], [[1.0]])
    prior = g([[0.0]], [[1.0]])
    out = poe_fuse([a], prior_expert=prior, masks=[np.array([False])])
    assert out.mean.item() == 0.0 and out.std.item() == 1.0


def test_guarded_poe_is_bitwise_equal_to_dropping_the_expert():
    rng = np.random.default_rng(2)
    e1 = g(rng.normal(size=(4, 3)), rng.uniform(0.3, 2, (4, 3)))
    e2 = g(rng.normal(size=(4, 3)), rng.uniform(0.3, 2, (4, 3)))
    fused, present = poe_fuse_guarded([e1, e2], [np.ones(4, bool), np.zeros(4, bool)])
    alone, _ = poe_fuse_guarded([e1], [np.ones(4, bool)])
    assert present.all()
    np.testing.assert_array_equal(fused.mean.data, alone.mean.data)
    np.testing.assert_array_equal(fused.std.data, alone.std.data)


def test_guarded_poe_flags_empty_rows():
    e = g(np.zeros((2, 1)), np.ones((2, 1)))
    fused, present = poe_fuse_guarded([e], [np.array([True, False])])
    np.testing.assert_array_equal(present, [True, False])
    assert np.all(np.isfinite(fused.std.data))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.1, 3)), min_size=1, max_size=4))
def test_poe_precision_is_sum_and_variance_shrinks(params):
    experts = [g([m], [s]) for m, s in params]
    out = poe_fuse(experts)
    precs = [1 / s**2 for _, s in params]
    assert 1 / out.variance.item() == pytest.approx(sum(precs), rel=1e-10)
    assert out.variance.item() <= min(s**2 for _, s in params) * (1 + 1e-12)
    lo, hi = min(m for m, _ in params), max(m for m, _ in params)
    assert lo - 1e-9 <= out.mean.item() <= hi + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 3), st.floats(-3, 3), st.floats(0.05, 3))
def test_kl_nonnegative_and_zero_iff_equal(m1, s1, m2, s2):
    kl = kl_divergence(g([m1], [s1]), g([m2], [s2])).item()
    assert kl >= 0.0
    assert kl_divergence(g([m1], [s1]), g([m1], [s1])).item() == 0.0


def test_kl_gradient_check():
    mq, sq = dm.parameter([0.3, -1.0]), dm.parameter([0.8, 1.7])
    mp, sp = dm.parameter([1.0, 0.0]), dm.parameter([1.2, 0.6])
    err = dm.grad_check(lambda: kl_divergence(DiagGaussian(mq, sq), DiagGaussian(mp, sp)).sum(), [mq, sq, mp, sp])
    assert err < 1e-6
