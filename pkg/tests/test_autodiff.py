import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedcsr import autodiff as ad
from fedcsr.autodiff import NumericError, Tape, TapeError
from fedcsr.gradcheck import finite_difference_check
from fedcsr.optim import AdamHyper, AdamState, adam_step


# -- create -------------------------------------------------------------------

def test_create_round_trip():
    t = ad.create([2, 2], [1, 2, 3, 4])
    assert t.shape == (2, 2)
    assert t.values == [1.0, 2.0, 3.0, 4.0]


def test_create_scalar_like():
    t = ad.create([1], [0])
    assert t.shape == (1,) and t.item() == 0.0


@pytest.mark.parametrize("shape,values", [([2], [1, 2, 3]), ([], []), ([0], [])])
def test_create_rejects_bad_shapes(shape, values):
    with pytest.raises(ValueError):
        ad.create(shape, values)


def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericError):
        ad.exp(ad.tensor([1000.0]))


# -- matmul / elementwise -----------------------------------------------------

def test_matmul_identity_and_small():
    A = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(ad.tensor(np.eye(2)), A).data, A.data)
    assert ad.matmul(ad.tensor([[1.0, 0.0]]), ad.tensor([[2.0], [5.0]])).data.tolist() == [[2.0]]


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


def test_matmul_gradient_fd():
    rng = np.random.default_rng(0)
    B = ad.tensor(rng.uniform(-2, 2, (4, 2)))
    err = finite_difference_check(lambda x: ad.sum(ad.matmul(x, B)), rng.uniform(-2, 2, (3, 4)))
    assert err <= 1e-6


def test_relu_values_and_kink_derivative():
    x = ad.parameter([-1.0, 0.0, 2.0])
    with Tape() as tape:
        y = ad.relu(x)
        g = tape.backward(ad.sum(y))
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    assert g[x].tolist() == [0.0, 0.0, 1.0]  # derivative at exactly 0 is 0


def test_tanh_derivative_at_zero():
    x = ad.parameter([0.0])
    with Tape() as tape:
        g = tape.backward(ad.sum(ad.tanh(x)))
    assert g[x][0] == 1.0


def test_sigmoid_gradient_fd():
    x = np.random.default_rng(1).uniform(-2, 2, 10)
    assert finite_difference_check(lambda z: ad.sum(ad.sigmoid(z)), x) <= 1e-6


def test_log_rejects_non_positive():  # domain error, not a silent NaN
    with pytest.raises(NumericError):
        ad.log(ad.tensor([1.0, 0.0]))


def test_elementwise_dispatch_and_broadcast():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = ad.tensor([10.0, 20.0])
    assert ad.elementwise("add", a, b).data.tolist() == [[11.0, 22.0], [13.0, 24.0]]
    assert ad.elementwise("mul", a, a).data.tolist() == [[1.0, 4.0], [9.0, 16.0]]
    with pytest.raises(ValueError):
        ad.elementwise("add", a, ad.tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        ad.elementwise("add", a, ad.tensor(np.ones((2, 1))))


def test_bias_broadcast_gradient_sums_leading_axes():
    b = ad.parameter([0.0, 0.0])
    with Tape() as tape:
        g = tape.backward(ad.sum(ad.add(ad.tensor(np.ones((3, 2))), b)))
    assert g[b].tolist() == [3.0, 3.0]


# -- reductions ---------------------------------------------------------------

def test_reduce_values():
    assert ad.sum(ad.tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert ad.mean(ad.tensor([[1.0, 3.0], [3.0, 5.0]]), axis=0).data.tolist() == [2.0, 4.0]
    assert ad.reduce("sum", ad.tensor([[1.0, 2.0]]), axis=1).data.tolist() == [3.0]


def test_reduce_invalid_axis():
    with pytest.raises(ValueError):
        ad.sum(ad.tensor([1.0, 2.0]), axis=1)


def test_mean_gradient_is_one_over_n():
    x = ad.parameter(np.arange(4.0))
    with Tape() as tape:
        g = tape.backward(ad.mean(x))
    assert np.array_equal(g[x], np.full(4, 0.25))


# -- log_softmax --------------------------------------------------------------

def test_log_softmax_uniform_and_stable():
    assert np.allclose(ad.log_softmax(ad.tensor([0.0, 0.0])).data, np.log(0.5))
    out = ad.log_softmax(ad.tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-12) and out[1] == pytest.approx(-1000.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
def test_log_softmax_normalised(logits):
    rows = np.exp(ad.log_softmax(ad.tensor(logits)).data).sum(axis=-1)
    assert np.all(np.abs(rows - 1.0) <= 1e-12)


# -- backward -----------------------------------------------------------------

def test_backward_square():
    x = ad.parameter([3.0])
    with Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    assert ad.backward(loss)[x][0] == 6.0
    assert tape.consumed


def test_detached_leaf_gets_no_gradient():
    w = ad.parameter([1.0, 2.0])
    teacher = ad.detach(w)
    with Tape() as tape:
        g = tape.backward(ad.sum(ad.mul(w, teacher)))
    assert teacher not in g
    assert g[w].tolist() == [1.0, 2.0]


def test_backward_twice_is_an_error():
    x = ad.parameter([1.0])
    with Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)


def test_backward_needs_scalar():
    x = ad.parameter([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(TapeError):
            tape.backward(y)


def test_ops_outside_a_tape_are_not_recorded():
    x = ad.parameter([1.0])
    y = ad.mul(x, x)
    with pytest.raises(TapeError):
        ad.backward(ad.sum(y))


def test_shared_input_gradients_accumulate():
    x = ad.parameter([2.0])
    with Tape() as tape:
        g = tape.backward(ad.sum(ad.add(ad.mul(x, x), x)))  # x^2 + x
    assert g[x][0] == 5.0


def test_three_layer_network_fd():
    rng = np.random.default_rng(2)
    W1, W2, W3 = (ad.parameter(rng.uniform(-1, 1, s)) for s in [(4, 5), (5, 3), (3, 1)])
    X = ad.tensor(rng.uniform(-2, 2, (6, 4)))

    def f():
        h = ad.tanh(ad.matmul(X, W1))
        h = ad.sigmoid(ad.matmul(h, W2))
        return ad.sum(ad.matmul(h, W3))

    from fedcsr.gradcheck import check_params
    assert check_params(f, {"W1": W1, "W2": W2, "W3": W3}, max_coords=None).max_rel_error <= 1e-4


# -- finite differences -------------------------------------------------------

def test_fd_sum_is_exact():
    x = np.random.default_rng(3).uniform(-2, 2, 7)
    assert finite_difference_check(ad.sum, x) <= 1e-10


def test_fd_square_norm():
    x = np.random.default_rng(4).uniform(-2, 2, 7)
    assert finite_difference_check(lambda z: ad.sum(ad.mul(z, z)), x, h=1e-5) <= 1e-7


def test_fd_relu_kink_is_skipped():
    res = finite_difference_check(lambda z: ad.sum(ad.relu(z)), np.array([0.0, 1.0, -1.0]), details=True)
    assert res.skipped == [(0,)]
    assert res.checked == 2 and res.max_rel_error <= 1e-8


def test_fd_flags_a_wrong_derivative():
    # negative control: an op whose backward is off by a factor of two
    def bad_square(z):
        return ad.record_op("bad", z.data ** 2, (z,), lambda g, n: (g * z.data,))

    x = np.random.default_rng(5).uniform(0.5, 2, 4)
    assert finite_difference_check(lambda z: ad.sum(bad_square(z)), x) > 1e-2


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    p = {"w": ad.parameter([1.0, -2.0])}
    before = p["w"].data.copy()
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, AdamHyper())
    assert np.array_equal(p["w"].data, before) and state.t == 1


def test_adam_first_step_magnitude():
    p = {"w": ad.parameter([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), AdamHyper(lr=0.001, eps=0.05))
    assert abs(p["w"].data[0]) == pytest.approx(0.001 / 1.05, rel=1e-12)
    assert p["w"].data[0] == pytest.approx(-9.5238095238e-4, rel=1e-9)


def test_adam_beta_zero_is_scaled_sign_sgd():
    g = np.array([0.3, -2.0, 0.01])
    p = {"w": ad.parameter(np.zeros(3))}
    hyper = AdamHyper(lr=0.01, beta1=0.0, beta2=0.0, eps=0.05)
    state = AdamState()
    for _ in range(2):
        adam_step(p, {"w": g}, state, hyper)
    expected = -2 * hyper.lr * np.sign(g) * np.abs(g) / (np.abs(g) + hyper.eps)
    assert np.allclose(p["w"].data, expected, rtol=1e-12, atol=0)
    assert state.t == 2


def test_adam_missing_gradient_counts_as_zero():
    p = {"a": ad.parameter([1.0]), "b": ad.parameter([1.0])}
    adam_step(p, {"a": np.array([1.0])}, AdamState(), AdamHyper())
    assert p["b"].data[0] == 1.0 and p["a"].data[0] < 1.0
