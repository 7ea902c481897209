import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from megre import sampling
from megre import tensor as T
from megre.tensor import Tensor


@pytest.mark.parametrize("ratio", [0.05, 0.23, 0.6])
def test_renormalized_mean_and_range(ratio):
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = Tensor(rng.uniform(-1, 1, size=(2, 32, 32)) + rng.uniform(-0.5, 0.5))
        P = sampling.weights_to_probabilities(w, 5.0, ratio).data
        assert np.all((P >= 0) & (P <= 1))
        np.testing.assert_allclose(P.mean(axis=(1, 2)), ratio, atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.02, 0.98), st.floats(-3, 3), st.integers(0, 1000))
def test_renormalize_both_branches(ratio, offset, seed):
    rng = np.random.default_rng(seed)
    p = Tensor(1 / (1 + np.exp(-(rng.standard_normal((8, 8)) + offset))))
    q = sampling.renormalize(p, ratio).data
    assert abs(float(q.mean(dtype=np.float64)) - ratio) < 1e-4
    assert q.min() >= -1e-6 and q.max() <= 1 + 1e-6


def test_monte_carlo_density_matches_probability():
    rng = np.random.default_rng(1)
    P = sampling.weights_to_probabilities(Tensor(rng.uniform(-0.5, 0.5, (1, 32, 32))))
    draws = np.stack([sampling.sample_mask(P, s).data for s in range(300)])
    assert abs(draws.mean() - P.data.mean()) < 0.02
    assert np.all(draws[:, :, 0, 0] == 1)
    assert set(np.unique(draws)) <= {0.0, 1.0}


def test_sample_gradient_is_straight_through():
    rng = np.random.default_rng(2)
    P = Tensor(rng.random((2, 8, 8)), requires_grad=True)
    U = sampling.sample_mask(P, 0, force_dc=False)
    upstream = rng.standard_normal(U.shape).astype(np.float32)
    U.backward(upstream)
    assert np.array_equal(P.grad, upstream)


def test_forced_dc_blocks_gradient_only_at_dc():
    rng = np.random.default_rng(3)
    P = Tensor(rng.random((2, 8, 8)), requires_grad=True)
    U = sampling.sample_mask(P, 0)
    upstream = rng.standard_normal(U.shape).astype(np.float32)
    U.backward(upstream)
    expected = upstream.copy()
    expected[:, 0, 0] = 0
    assert np.array_equal(P.grad, expected)


@pytest.mark.parametrize("ratio", [0.1, 0.23, 0.5])
def test_manual_variable_density_exact_count(ratio):
    mask = sampling.manual_variable_density(32, ratio, seed=4)
    assert mask.sum() == round(ratio * 32 * 32)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_manual_variable_density_acs_and_centre_weighting():
    mask = sampling.manual_variable_density(32, 0.23, decay_power=4.0, acs_lines=4, seed=5)
    centre = np.fft.fftshift(mask)[14:18, 14:18]
    assert centre.all()
    shifted = np.fft.fftshift(mask)
    assert shifted[8:24, 8:24].mean() > shifted.mean()
    with pytest.raises(ValueError):
        sampling.manual_variable_density(8, 0.1, acs_lines=8)


def test_ratio_validation():
    with pytest.raises(ValueError):
        sampling.weights_to_probabilities(Tensor(np.zeros((4, 4))), 5.0, 1.0)
    with pytest.raises(ValueError):
        sampling.SamplingPattern("spo-multi", 2, 8, target_ratio=0.0)
    with pytest.raises(ValueError):
        sampling.SamplingPattern("loupe", 2, 8)


def test_spo_single_shares_mask_across_echoes():
    pat = sampling.SamplingPattern("spo-single", 4, 16, seed=0)
    assert pat.weights.shape == (1, 16, 16)
    U = pat.draw(3).data
    assert all(np.array_equal(U[0], U[j]) for j in range(4))


def test_spo_multi_draws_differ_per_echo():
    pat = sampling.SamplingPattern("spo-multi", 4, 16, seed=0)
    assert pat.weights.shape == (4, 16, 16)
    U = pat.draw(3).data
    assert not np.array_equal(U[0], U[1])


def test_freeze_pattern_pins_masks():
    pat = sampling.SamplingPattern("spo-multi", 2, 16, seed=0)
    frozen = sampling.freeze_pattern(pat, 9)
    np.testing.assert_array_equal(pat.sample(0).data, frozen)
    np.testing.assert_array_equal(pat.sample(1).data, frozen)
    with T.no_grad():
        again = pat.draw(9).data
    np.testing.assert_array_equal(again, frozen)


def test_manual_pattern_has_no_probabilities_to_draw():
    pat = sampling.SamplingPattern("manual", 2, 16)
    with pytest.raises(RuntimeError):
        pat.draw(0)
    assert pat.masks().shape == (2, 16, 16)
