import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parsep import nncore as nn
from parsep.dcloss import dc_loss, dc_loss_batch, dc_loss_naive, make_targets
from parsep.errors import ConfigError, ShapeError


def unit_rows(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_targets(rng, t, f):
    return np.eye(2)[rng.integers(0, 2, (t, f))]


def test_targets_uniform_dominance():
    U = make_targets([np.full((3, 4), 2.0), np.ones((3, 4))])
    assert np.all(U[..., 0] == 1) and np.all(U[..., 1] == 0)


def test_targets_tie_goes_to_first():
    U = make_targets([np.ones((2, 2)), -np.ones((2, 2))])
    assert np.all(U[..., 0] == 1)


def test_targets_match_direct_comparison():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 7)) + 1j * rng.standard_normal((6, 7))
    b = rng.standard_normal((6, 7)) + 1j * rng.standard_normal((6, 7))
    U = make_targets([a, b])
    for t in range(6):
        for f in range(7):
            expect = 0 if abs(a[t, f]) >= abs(b[t, f]) else 1
            assert U[t, f, expect] == 1 and U[t, f].sum() == 1


def test_targets_require_two_sources():
    with pytest.raises(ConfigError):
        make_targets([np.ones((2, 2))] * 3)
    with pytest.raises(ShapeError):
        make_targets([np.ones((2, 2)), np.ones((2, 3))])


def test_loss_zero_for_padded_one_hot():
    U = random_targets(np.random.default_rng(1), 4, 5)
    V = np.concatenate([U, np.zeros((4, 5, 3))], axis=-1)
    assert dc_loss(V, U)[0] == 0.0


def test_two_bin_hand_example():
    V = np.array([[[1.0], [1.0]]])
    U = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    # VV^T = ones, UU^T = I, difference has two unit off-diagonals -> 2, over (TF)^2 = 4
    assert dc_loss(V, U)[0] == 0.5
    assert dc_loss_naive(V, U) == 0.5


def test_factorized_equals_naive_and_gradient():
    rng = np.random.default_rng(2)
    V, U = unit_rows(rng, (5, 6, 3)), random_targets(rng, 5, 6)
    loss, grad = dc_loss(V, U)
    assert abs(loss - dc_loss_naive(V, U)) <= 1e-10 * abs(loss)
    h = 1e-5
    num = np.zeros_like(V)
    for i in np.ndindex(V.shape):
        Vp, Vm = V.copy(), V.copy()
        Vp[i] += h
        Vm[i] -= h
        num[i] = (dc_loss(Vp, U)[0] - dc_loss(Vm, U)[0]) / (2 * h)
    assert np.linalg.norm(num - grad) / np.linalg.norm(num) < 1e-4


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dc_loss(np.zeros((2, 3, 4)), np.zeros((3, 2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 5))
def test_loss_invariances(seed, t, f, d):
    rng = np.random.default_rng(seed)
    V, U = unit_rows(rng, (t, f, d)), random_targets(rng, t, f)
    loss = dc_loss(V, U)[0]
    assert loss >= 0
    assert abs(dc_loss(V, U[..., ::-1])[0] - loss) <= 1e-12 * max(1.0, loss)
    perm = rng.permutation(t * f)
    Vp = V.reshape(-1, d)[perm].reshape(V.shape)
    Up = U.reshape(-1, 2)[perm].reshape(U.shape)
    assert abs(dc_loss(Vp, Up)[0] - loss) <= 1e-12 * max(1.0, loss)
    assert abs(dc_loss_naive(V, U) - loss) <= 1e-10 * max(loss, 1e-300) + 1e-15


def test_batch_loss_is_mean_with_matching_gradient():
    rng = np.random.default_rng(3)
    V, U = unit_rows(rng, (3, 4, 5, 2)), np.stack([random_targets(rng, 4, 5) for _ in range(3)])
    out = dc_loss_batch(nn.Tensor(V), U)
    assert np.isclose(float(out.data), np.mean([dc_loss(V[b], U[b])[0] for b in range(3)]), rtol=1e-14)
    assert nn.gradcheck(lambda v: dc_loss_batch(v, U), [V], rng) < 1e-4
