import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prorl.errors import ContractError
from prorl.nn import Adam, MirroredMlp, Mlp, MlpSpec, elu, huber_grad, huber_loss, network_from_dict


def finite_difference(f, params, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + eps
            up = f()
            p[idx] = old - eps
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1e-7, np.abs(a) + np.abs(b))


# -- elu ------------------------------------------------------------------


def test_elu_examples():
    assert elu(0.0) == 0.0
    assert elu(2.0) == 2.0
    assert elu(-1.0) == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert float(elu(-1.0)) == pytest.approx(-0.632121, abs=1e-6)


@given(st.floats(-30, 50), st.floats(-30, 50))
def test_elu_monotone(a, b):
    # below about -37 expm1 rounds to exactly -1 in float64
    if a < b:
        assert elu(a) < elu(b)
    assert elu(a) > -1.0


# -- huber -----------------------------------------------------------------


def test_huber_examples():
    assert huber_loss([0.3, -2.0], [0.3, -2.0]) == 0.0
    assert huber_loss([0.5], [0.0]) == pytest.approx(0.125)
    assert huber_loss([2.0], [0.0]) == pytest.approx(1.5)


def test_huber_length_mismatch():
    with pytest.raises(ContractError):
        huber_loss([1.0, 2.0], [1.0])


@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("sign", [-1.0, 1.0])
def test_huber_c1_at_delta(delta, sign):
    e = sign * delta
    h = 1e-7
    left = (huber_loss([e], [0.0], delta) - huber_loss([e - h], [0.0], delta)) / h
    right = (huber_loss([e + h], [0.0], delta) - huber_loss([e], [0.0], delta)) / h
    assert left == pytest.approx(sign * delta, abs=1e-5)
    assert right == pytest.approx(sign * delta, abs=1e-5)
    assert huber_grad([e], [0.0], delta)[0] == pytest.approx(sign * delta)


# squares of |e| < 1e-100 underflow to zero
@given(st.lists(st.floats(-1e3, 1e3).filter(lambda v: v == 0 or abs(v) > 1e-100), min_size=1, max_size=10))
def test_huber_nonnegative(values):
    target = np.zeros(len(values))
    loss = huber_loss(values, target)
    assert loss >= 0
    assert (loss == 0) == all(v == 0 for v in values)


# -- forward ---------------------------------------------------------------


def test_forward_zero_weights_gives_bias():
    spec = MlpSpec((3, 4, 2))
    net = Mlp(spec, [np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.array([0.7, -1.2])])
    np.testing.assert_array_equal(net.forward([1.0, -2.0, 3.0]), [0.7, -1.2])


def test_forward_single_linear_layer():
    net = Mlp(MlpSpec((1, 1)), [np.array([[3.0]])], [np.array([1.0])])
    assert net.forward([2.0])[0] == 7.0


def test_forward_hand_computed_2_2_1():
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.0, -1.0])
    w2 = np.array([[2.0, -3.0]])
    b2 = np.array([0.5])
    net = Mlp(MlpSpec((2, 2, 1)), [w1, w2], [b1, b2])
    # hidden pre-activations: (1 - 2, 0.5 + 4 - 1) = (-1, 3.5)
    expected = 2.0 * (math.exp(-1.0) - 1.0) - 3.0 * 3.5 + 0.5
    assert net.forward([1.0, 2.0])[0] == pytest.approx(expected, rel=1e-14)


def test_forward_dimension_mismatch():
    net = Mlp.initialize(MlpSpec((3, 2)), np.random.default_rng(0))
    with pytest.raises(ContractError):
        net.forward([1.0, 2.0])


def test_forward_deterministic_and_batch_consistent():
    rng = np.random.default_rng(1)
    net = Mlp.initialize(MlpSpec((5, 8, 8, 3)), rng)
    x = rng.normal(size=(7, 5))
    batch = net.forward(x)
    for i in range(7):
        np.testing.assert_array_equal(net.forward(x[i]), net.forward(x[i]))
        np.testing.assert_allclose(net.forward(x[i]), batch[i], rtol=1e-14, atol=1e-15)


def test_spec_validation():
    with pytest.raises(ContractError):
        MlpSpec((3,))
    with pytest.raises(ContractError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ContractError):
        MlpSpec((3, 1), hidden_activation="relu")


def test_initialization_bounds():
    spec = MlpSpec((10, 32, 32, 4))
    net = Mlp.initialize(spec, np.random.default_rng(3))
    for w, b, (fi, fo) in zip(net.weights, net.biases, zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        assert np.all(np.abs(w) <= math.sqrt(6 / (fi + fo)))
        assert np.all(b == 0)


# -- backward --------------------------------------------------------------


def test_zero_gradient_at_target():
    rng = np.random.default_rng(2)
    net = Mlp.initialize(MlpSpec((3, 5, 2)), rng)
    x = rng.normal(size=(4, 3))
    loss, grads = net.huber_gradients(x, net.forward(x))
    assert loss == 0.0
    for g in grads:
        assert np.all(g == 0.0)


def test_linear_gradient_matches_closed_form():
    w, b, x, y = 0.8, -0.1, 0.5, 0.6
    net = Mlp(MlpSpec((1, 1)), [np.array([[w]])], [np.array([b])])
    _, grads = net.huber_gradients([[x]], [[y]])
    e = w * x + b - y  # |e| < 1, quadratic region
    assert abs(e) < 1
    assert grads[0][0, 0] == pytest.approx(e * x, rel=1e-14)
    assert grads[1][0] == pytest.approx(e, rel=1e-14)


def _check_gradients(rng, sizes, activation):
    net = Mlp.initialize(MlpSpec(sizes, hidden_activation=activation), rng)
    for b in net.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    x = rng.normal(size=(6, sizes[0]))
    y = rng.normal(scale=2.0, size=(6, sizes[-1]))
    _, grads = net.huber_gradients(x, y)
    numeric = finite_difference(lambda: huber_loss(net.forward(x), y), net.params)
    worst = 0.0
    for g, n in zip(grads, numeric):
        worst = max(worst, float(relative_error(g, n).max()))
    return worst


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("activation", ["elu", "tanh"])
def test_gradient_check_random_networks(seed, activation):
    rng = np.random.default_rng(seed)
    depth = rng.integers(1, 4)
    sizes = tuple(int(s) for s in rng.integers(1, 9, size=depth + 1))
    assert _check_gradients(rng, sizes, activation) < 1e-4


def test_custom_scalar_backward():
    rng = np.random.default_rng(5)
    net = Mlp.initialize(MlpSpec((3, 6, 2)), rng)
    x = rng.normal(size=(4, 3))
    c = rng.normal(size=(4, 2))

    def scalar():
        return float(np.sum(np.sin(net.forward(x)) * c))

    out, cache = net.forward_cached(x)
    grads, dx = net.backward(cache, np.cos(out) * c)
    numeric = finite_difference(scalar, net.params)
    for g, n in zip(grads, numeric):
        assert relative_error(g, n).max() < 1e-4
    numeric_x = finite_difference(scalar, [x])[0]
    assert relative_error(dx, numeric_x).max() < 1e-4


def test_backward_shape_mismatch():
    net = Mlp.initialize(MlpSpec((2, 3, 1)), np.random.default_rng(0))
    _, cache = net.forward_cached(np.zeros((3, 2)))
    with pytest.raises(ContractError):
        net.backward(cache, np.zeros((2, 1)))
    with pytest.raises(ContractError):
        net.huber_gradients(np.zeros((3, 2)), np.zeros((3, 2)))


# -- adam ------------------------------------------------------------------


def test_adam_zero_gradient_fixed_point():
    p = [np.array([1.0, -2.0]), np.array([[0.5]])]
    before = [q.copy() for q in p]
    opt = Adam(p, lr=1e-2)
    for _ in range(5):
        opt.step([np.zeros(2), np.zeros((1, 1))])
    for q, q0 in zip(p, before):
        np.testing.assert_array_equal(q, q0)
    for m, v in zip(opt.m, opt.v):
        assert np.all(m == 0) and np.all(v == 0)
    assert opt.t == 5


@pytest.mark.parametrize("g", [3.7, -0.02, 1e-3])
def test_adam_first_step_is_signed_lr(g):
    p = [np.array([0.4])]
    opt = Adam(p, lr=1e-3)
    opt.step([np.array([g])])
    # m_hat = g, v_hat = g^2 after bias correction
    expected = 0.4 - 1e-3 * g / (abs(g) + 1e-8)
    assert p[0][0] == pytest.approx(expected, rel=1e-12)
    assert p[0][0] == pytest.approx(0.4 - 1e-3 * math.copysign(1, g), abs=1e-8)


def test_adam_decoupled_decay():
    p = [np.array([2.0, -3.0])]
    opt = Adam(p, lr=1e-3, weight_decay=1e-4)
    opt.step([np.zeros(2)])
    np.testing.assert_allclose(p[0], np.array([2.0, -3.0]) * (1 - 1e-3 * 1e-4), rtol=1e-15)


def test_adam_second_moment_nonnegative():
    rng = np.random.default_rng(0)
    p = [rng.normal(size=(3, 3))]
    opt = Adam(p)
    for _ in range(20):
        opt.step([rng.normal(size=(3, 3))])
        assert np.all(opt.v[0] >= 0)


def test_adam_rejects_bad_lr():
    with pytest.raises(ContractError):
        Adam([np.zeros(1)], lr=0.0)


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_serialization_roundtrip_exact(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.initialize(MlpSpec((4, 7, 3), hidden_activation="tanh"), rng)
    for b in net.biases:
        b[:] = rng.normal(size=b.shape)
    import json

    back = Mlp.from_dict(json.loads(json.dumps(net.to_dict())))
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(back.forward(x), net.forward(x))
    for a, b in zip(back.params, net.params):
        np.testing.assert_array_equal(a, b)


# -- mirrored wrapper -----------------------------------------------------


def _mirrored(rng, shift=True):
    net = Mlp.initialize(MlpSpec((4, 6, 3)), rng)
    for b in net.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    return MirroredMlp(net, [-1, -1, 1, -1], [1, 1, -1], [1, 0, 2],
                       rng.normal(size=4) if shift else None, rng.normal(size=3) if shift else None)


def test_mirrored_equivariance():
    rng = np.random.default_rng(0)
    m = _mirrored(rng, shift=False)
    x = rng.normal(size=(10, 4))
    a, b = m.forward(x), m.forward(x * m.in_sign)
    np.testing.assert_allclose(b, m.out_sign * a[:, m.out_perm], atol=1e-14)


def test_mirrored_gradients():
    rng = np.random.default_rng(1)
    m = _mirrored(rng)
    x = rng.normal(size=(5, 4))
    y = rng.normal(size=(5, 3))
    _, grads = m.huber_gradients(x, y)
    numeric = finite_difference(lambda: huber_loss(m.forward(x), y), m.params)
    for g, n in zip(grads, numeric):
        assert relative_error(g, n).max() < 1e-4
    out, cache = m.forward_cached(x)
    w = rng.normal(size=out.shape)
    _, dx = m.backward(cache, w)
    numeric_x = finite_difference(lambda: float(np.sum(w * m.forward(x))), [x])[0]
    assert relative_error(dx, numeric_x).max() < 1e-4


def test_mirrored_roundtrip():
    m = _mirrored(np.random.default_rng(2))
    back = network_from_dict(m.to_dict())
    x = np.random.default_rng(3).normal(size=(4, 4))
    assert isinstance(back, MirroredMlp)
    np.testing.assert_array_equal(back.forward(x), m.forward(x))
    assert isinstance(network_from_dict(m.inner.to_dict()), Mlp)
    with pytest.raises(ContractError):
        MirroredMlp(m.inner, 1.0, 1.0, [0, 0, 1])
