import numpy as np
import pytest

from megre import admm, forward, phantom
from megre import tensor as T
from megre.cplx import ComplexTensor

from _cases import dense_normal_matrix, random_complex


def _problem(size=8, n_echoes=2, n_coils=2, seed=0):
    rng = np.random.default_rng(seed)
    coils = phantom.make_coils(n_coils, size, seed)
    s = phantom.simulate_signal(phantom.make_phantom("random-smooth", size, n_echoes, seed))
    full = phantom.acquire_full_kspace(s, coils, 0.01, seed)
    masks = (rng.random((n_echoes, size, size)) < 0.4).astype(np.float32)
    return forward.undersample(full.samples, masks), coils, masks


def test_channel_packing_order_and_round_trip():
    z = np.array([[[1 + 2j]], [[3 + 4j]]])
    x = ComplexTensor.from_numpy(z)
    chans = admm.to_channels(x).data.ravel()
    np.testing.assert_array_equal(chans, [1, 2, 3, 4])
    np.testing.assert_array_equal(admm.from_channels(admm.to_channels(x)).numpy(), z)


@pytest.mark.parametrize("tff", [False, True])
def test_zero_initialized_denoiser_is_identity(tff):
    model = admm.AdmmModel(admm.AdmmConfig(n_echoes=3, width=8, tff=tff), seed=1)
    x = ComplexTensor.from_numpy(random_complex(np.random.default_rng(0), 3, 8, 8))
    with T.no_grad():
        out = admm.denoise(x, model).numpy()
    np.testing.assert_array_equal(out, x.numpy())


def test_first_unroll_matches_dense_oracle():
    # identity denoiser and u = 0: s1 solves (A^H A + rho/2 I) s = A^H b + rho/2 A^H b
    data, coils, masks = _problem()
    model = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, unrolls=1, width=8, cg_iters=200, cg_tol=1e-9))
    with T.no_grad():
        s1 = admm.admm_forward(data, coils, model)[0].numpy()
        atb = forward.zero_filled(data, coils).numpy()
    rho = float(model.rho(0).data)
    for j in range(2):
        with T.precision(np.float64):
            M = dense_normal_matrix(coils, masks[j], rho)
        expected = np.linalg.solve(M, ((1 + rho / 2) * atb[j]).ravel().astype(np.complex128)).reshape(8, 8)
        assert np.linalg.norm(s1[j] - expected) / np.linalg.norm(expected) < 1e-4


def test_admm_returns_one_iterate_per_unroll():
    data, coils, _ = _problem()
    model = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, unrolls=3, width=8, tff=True))
    with T.no_grad():
        iterates = admm.admm_forward(data, coils, model)
    assert len(iterates) == 3 and all(it.shape == (2, 8, 8) for it in iterates)


def test_tff_hidden_state_shapes_and_errors():
    cfg = admm.AdmmConfig(n_echoes=4, width=8, tff=True, tff_hidden=6)
    model = admm.AdmmModel(cfg)
    x = ComplexTensor.zeros((4, 8, 8))
    assert admm.tff_forward(x, model).shape == (24, 8, 8)
    with pytest.raises(RuntimeError):
        admm.tff_forward(x, admm.AdmmModel(admm.AdmmConfig(n_echoes=4, width=8)))
    with pytest.raises(ValueError):
        admm.denoise(ComplexTensor.zeros((3, 8, 8)), model)


def test_tff_recurrence_is_causal_over_echoes():
    model = admm.AdmmModel(admm.AdmmConfig(n_echoes=3, width=8, tff=True, tff_hidden=4), seed=2)
    rng = np.random.default_rng(1)
    a = random_complex(rng, 3, 8, 8)
    b = a.copy()
    b[2] += 1.0
    with T.no_grad():
        ha = admm.tff_forward(ComplexTensor.from_numpy(a), model).data
        hb = admm.tff_forward(ComplexTensor.from_numpy(b), model).data
    np.testing.assert_array_equal(ha[:8], hb[:8])
    assert not np.array_equal(ha[8:], hb[8:])


def test_weight_sharing_parameter_counts():
    shared = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, unrolls=3, width=8))
    separate = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, unrolls=3, width=8, share_weights=False))
    rho_count = 3
    assert separate.n_parameters() - rho_count == 3 * (shared.n_parameters() - rho_count)


def test_rho_initialized_to_one_and_positive():
    model = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, unrolls=2, width=8))
    np.testing.assert_allclose(float(model.rho(0).data), 1.0, rtol=1e-6)
    model.params["rho_raw"].data[:] = -30.0
    assert float(model.rho(1).data) > 0


def test_state_dict_round_trip_and_errors():
    a = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, width=8, tff=True), seed=0)
    b = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, width=8, tff=True), seed=5)
    b.load_state_dict(a.state_dict())
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    state = a.state_dict()
    state.pop("rho_raw")
    with pytest.raises(KeyError):
        b.load_state_dict(state)


def test_gradients_reach_every_parameter():
    data, coils, _ = _problem()
    model = admm.AdmmModel(admm.AdmmConfig(n_echoes=2, unrolls=2, width=8, tff=True), seed=0)
    model.params["denoiser0.conv4.weight"].data += 0.01
    its = admm.admm_forward(data, coils, model)
    (its[-1].abs2().sum()).backward()
    for name, p in model.params.items():
        assert p.grad is not None and np.any(p.grad != 0), name
