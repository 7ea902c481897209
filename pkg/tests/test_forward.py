import numpy as np
import pytest

from megre import admm, forward, phantom
from megre import tensor as T
from megre.cplx import ComplexTensor

from _cases import dense_normal_matrix, random_complex, random_encoding


def _inner(a: np.ndarray, b: np.ndarray) -> complex:
    return complex(np.vdot(b.astype(np.complex128), a.astype(np.complex128)))


@pytest.mark.parametrize("trial", range(10))
def test_adjoint_identity(trial):
    rng = np.random.default_rng(trial)
    coils, masks = random_encoding(rng, seed=trial)
    x = random_complex(rng, 4, 16, 16)
    y = random_complex(rng, 4, 4, 16, 16)
    with T.no_grad():
        Ax = forward.encode(ComplexTensor.from_numpy(x), coils, masks).numpy()
        AHy = forward.adjoint(ComplexTensor.from_numpy(y), coils, masks).numpy()
    lhs, rhs = _inner(Ax, y), _inner(x, AHy)
    assert abs(lhs - rhs) / (np.linalg.norm(Ax) * np.linalg.norm(y)) < 1e-5


def test_encode_matches_numpy_oracle():
    rng = np.random.default_rng(1)
    coils, masks = random_encoding(rng, size=8, n_echoes=2, n_coils=3)
    x = random_complex(rng, 2, 8, 8)
    with T.no_grad():
        out = forward.encode(ComplexTensor.from_numpy(x), coils, masks).numpy()
    E = coils.numpy()
    expected = masks[:, None] * np.fft.fft2(x[:, None] * E[None], norm="ortho")
    np.testing.assert_allclose(out, expected, atol=1e-5)


def test_full_sampling_with_normalized_coils_is_identity():
    rng = np.random.default_rng(2)
    coils = phantom.make_coils(4, 16, 0)
    x = random_complex(rng, 3, 16, 16)
    ones = np.ones((3, 16, 16), np.float32)
    with T.no_grad():
        out = forward.normal_op(ComplexTensor.from_numpy(x), coils, ones, 0.0).numpy()
    np.testing.assert_allclose(out, x, atol=1e-5)


def test_shape_mismatch_raises():
    coils = phantom.make_coils(2, 8, 0)
    with pytest.raises(ValueError):
        forward.encode(ComplexTensor.zeros((2, 8, 8)), coils, np.ones((3, 8, 8)))
    with pytest.raises(ValueError):
        forward.adjoint(ComplexTensor.zeros((2, 3, 8, 8)), coils, np.ones((2, 8, 8)))
    with pytest.raises(ValueError):
        forward.normal_op(ComplexTensor.zeros((2, 8, 8)), coils, np.ones((2, 8, 8)), -1.0)


@pytest.mark.parametrize("trial", range(5))
def test_cg_matches_dense_solve(trial):
    rng = np.random.default_rng(trial)
    coils = phantom.make_coils(3, 8, trial)
    mask = (rng.random((1, 8, 8)) < 0.35).astype(np.float32)
    rho = 0.5
    rhs = random_complex(rng, 1, 8, 8)
    with T.precision(np.float64):
        M = dense_normal_matrix(coils, mask[0], rho)
    expected = np.linalg.solve(M, rhs.ravel().astype(np.complex128)).reshape(1, 8, 8)
    with T.no_grad():
        x = admm.cg_solve(ComplexTensor.from_numpy(rhs), coils, mask, rho, n_iters=200, tol=1e-7).numpy()
    assert np.linalg.norm(x - expected) / np.linalg.norm(expected) < 1e-4


def test_cg_residual_non_increasing():
    rng = np.random.default_rng(7)
    coils, masks = random_encoding(rng, density=0.3)
    rhs = ComplexTensor.from_numpy(random_complex(rng, 4, 16, 16))
    info = admm.CGInfo(0, [])
    with T.no_grad():
        admm.cg_solve(rhs, coils, masks, 1.0, n_iters=20, tol=1e-12, info=info)
    norms = np.array(info.residual_norms)
    assert np.all(norms[1:] <= norms[:-1] * (1 + 1e-6))
    assert info.iterations > 0


def test_cg_rejects_non_positive_rho():
    coils = phantom.make_coils(2, 8, 0)
    with pytest.raises(ValueError):
        admm.cg_solve(ComplexTensor.zeros((1, 8, 8)), coils, np.ones((1, 8, 8)), 0.0)


def test_cg_zero_rhs_returns_zero():
    coils = phantom.make_coils(2, 8, 0)
    with T.no_grad():
        x = admm.cg_solve(ComplexTensor.zeros((2, 8, 8)), coils, np.ones((2, 8, 8)), 1.0)
    assert np.all(np.isfinite(x.numpy())) and np.allclose(x.numpy(), 0)


def test_zero_filled_equals_adjoint_of_undersampled():
    rng = np.random.default_rng(3)
    coils, masks = random_encoding(rng, size=8, n_echoes=2, n_coils=2)
    full = ComplexTensor.from_numpy(random_complex(rng, 2, 2, 8, 8))
    with T.no_grad():
        data = forward.undersample(full, masks)
        zf = forward.zero_filled(data, coils).numpy()
    E = coils.numpy()
    expected = forward.coil_combine(np.fft.ifft2(masks[:, None] * full.numpy(), norm="ortho"), E[None])
    np.testing.assert_allclose(zf, expected, atol=1e-5)
