import numpy as np

from megre.optim import Adam, AdamState, adam_step
from megre.tensor import Tensor


def test_first_adam_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3], dtype=np.float32)
    opt = Adam([p], lr=0.1)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-5)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((5, 4))
    p = np.zeros(4, np.float32)
    state = AdamState()
    m = v = np.zeros(4)
    ref = np.zeros(4)
    for t, g in enumerate(grads, start=1):
        adam_step([p], [g.astype(np.float32)], state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, atol=1e-5)


def test_missing_gradient_is_zero():
    p = np.ones(3, np.float32)
    adam_step([p], [None], AdamState())
    np.testing.assert_array_equal(p, 1.0)
