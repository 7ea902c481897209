import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from megre import phantom


def test_signal_matches_closed_form_voxel():
    t = phantom.default_echo_times(6)
    p = phantom.PhantomParams(np.full((2, 2), 0.8), np.full((2, 2), 0.05), np.full((2, 2), 0.3),
                              np.full((2, 2), 0.2), t)
    s = phantom.simulate_signal(p).numpy()
    expected = 0.8 * np.exp(-0.05 * t) * np.exp(1j * (0.3 + 0.2 * t))
    np.testing.assert_allclose(s[:, 0, 0], expected, rtol=1e-6)


def test_default_echo_times():
    t = phantom.default_echo_times(4)
    np.testing.assert_allclose(t, [1.972, 5.356, 8.740, 12.124])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(phantom.PHANTOM_KINDS))
def test_magnitude_non_increasing_over_echoes(seed, kind):
    p = phantom.make_phantom(kind, 16, 5, seed)
    mag = np.abs(phantom.simulate_signal(p).numpy())
    assert np.all(np.diff(mag, axis=0) <= 1e-7)


@pytest.mark.parametrize("kind", phantom.PHANTOM_KINDS)
def test_phantom_ranges_and_determinism(kind):
    a = phantom.make_phantom(kind, 32, 4, 7)
    b = phantom.make_phantom(kind, 32, 4, 7)
    np.testing.assert_array_equal(a.stack(), b.stack())
    assert a.m0.min() >= 0 and a.m0.max() <= 1
    inside = a.m0 > 0
    assert np.all((a.r2star[inside] >= 0.01) & (a.r2star[inside] <= 0.1))
    assert np.all(np.abs(a.field) <= 0.3)
    assert np.all(np.abs(a.phi0) <= np.pi / 4 + 1e-6)


def test_phantom_argument_errors():
    with pytest.raises(ValueError):
        phantom.make_phantom("shepp-logan-like", 24, 4, 0)
    with pytest.raises(ValueError):
        phantom.make_phantom("cube", 16, 4, 0)
    with pytest.raises(ValueError):
        phantom.PhantomParams(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), [3.0, 1.0])


def test_coils_have_unit_root_sum_of_squares():
    coils = phantom.make_coils(4, 32, 3).numpy()
    np.testing.assert_allclose(np.sqrt(np.sum(np.abs(coils) ** 2, axis=0)), 1.0, rtol=1e-5)


def test_noise_level_matches_sigma():
    p = phantom.make_phantom("random-smooth", 32, 2, 0)
    s = phantom.simulate_signal(p)
    coils = phantom.make_coils(2, 32, 0)
    clean = phantom.acquire_full_kspace(s, coils, 0.0, 0).samples.numpy()
    noisy = phantom.acquire_full_kspace(s, coils, 0.05, 0).samples.numpy()
    diff = noisy - clean
    assert abs(diff.real.std() - 0.05) < 0.005 and abs(diff.imag.std() - 0.05) < 0.005
