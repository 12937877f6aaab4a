import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magseg.errors import DomainError, ShapeError, StateError
from magseg.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    clip,
    cosine,
    cross_entropy,
    elementwise,
    exp,
    grad_check,
    grad_check_report,
    kl_div,
    log,
    matmul,
    maximum,
    mul,
    no_grad,
    relu,
    softmax,
    sqrt,
    stack,
)

rng = np.random.default_rng(0)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- elementwise and broadcasting -------------------------------------------


def test_add_componentwise():
    assert np.array_equal(add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_mul_scalar_broadcast():
    assert np.array_equal(mul(Tensor([2]), Tensor([5, 7])).data, [10, 14])


def test_incompatible_shapes():
    with pytest.raises(ShapeError):
        add(Tensor([1, 2]), Tensor([1, 2, 3]))
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_elementwise_dispatch():
    assert np.array_equal(elementwise("sub", Tensor([3.0]), Tensor([1.0])).data, [2.0])
    assert np.allclose(elementwise("exp", Tensor([0.0])).data, [1.0])
    with pytest.raises(DomainError):
        elementwise("tanh", Tensor([0.0]))
    with pytest.raises(DomainError):
        elementwise("add", Tensor([0.0]))


def test_broadcast_gradient_sums_stretched_axes():
    a = leaf(np.ones((3, 1)))
    b = leaf(np.arange(6.0).reshape(3, 2))
    with Tape() as tape:
        tape.backward((a * b).sum())
    assert a.grad.shape == (3, 1)
    assert np.array_equal(a.grad[:, 0], [1, 5, 9])
    assert np.array_equal(b.grad, np.ones((3, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_ops_grad_check(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(3, 4))
    b = r.normal(size=(1, 4))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    assert grad_check(lambda x, y: (x * y + x - y).sum(), [a, b]) <= 1e-6
    assert grad_check(lambda x, y: (x / (y * y + 1.0)).sum(), [a, b]) <= 1e-6
    assert grad_check(lambda x: (exp(x) + log(x) + sqrt(x) + x**1.5).sum(), [pos]) <= 1e-6
    # keep clear of the kinks
    kinked = np.where(np.abs(a) < 0.05, 0.3, a)
    assert grad_check(lambda x: (relu(x) + maximum(x, 0.0) + clip(x, -0.5, 0.5)).sum(), [kinked]) <= 1e-6


def test_sqrt_zero_has_finite_gradient():
    x = leaf([0.0, 4.0])
    with Tape() as tape:
        tape.backward(sqrt(x).sum())
    assert np.array_equal(x.grad, [0.0, 0.25])


# -- matmul and shape ops -------------------------------------------------------


def test_matmul_examples():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert np.array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 4))))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_and_shape_ops_grad_check(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(4, 2))
    w = r.normal(size=(2, 3))
    assert grad_check(lambda x, y: (matmul(x, y) * matmul(x, y)).sum(), [a, b]) <= 1e-6
    assert grad_check(lambda x: (x.T * w).sum(), [a[:, :2]]) <= 1e-6
    assert grad_check(lambda x: (x.reshape(2, 6) ** 2).mean(), [a]) <= 1e-6
    assert grad_check(lambda x, y: (stack([x, y * 2.0], axis=1) ** 2).sum(), [a[:, 0], a[:, 1]]) <= 1e-6
    assert grad_check(lambda x: (x[1:, ::2] ** 2).sum() + x.mean(axis=0).sum(), [a]) <= 1e-6


# -- softmax ----------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-12)
    assert np.allclose(softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-12)
    assert np.allclose(softmax(Tensor([5.0, 5.0, 5.0]), temperature=0.1).data, [1 / 3] * 3, atol=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(DomainError):
        softmax(Tensor([1.0, 2.0]), temperature=tau)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)),
       st.sampled_from([0.1, 0.5, 1.0, 3.0]))
def test_softmax_sums_to_one_for_large_inputs(v, tau):
    s = softmax(Tensor(v), temperature=tau).data
    assert np.all(np.isfinite(s))
    assert abs(s.sum() - 1.0) <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_softmax_grad_check(seed):
    r = np.random.default_rng(seed)
    z, w = r.normal(size=(3, 5)), r.normal(size=(3, 5))
    for axis in (0, 1):
        assert grad_check(lambda x: (softmax(x, axis=axis, temperature=0.7) * w).sum(), [z]) <= 1e-6


# -- cosine -----------------------------------------------------------------


def test_cosine_examples():
    assert cosine(Tensor([3.0, 4.0]), Tensor([3.0, 4.0])).item() == pytest.approx(1.0, abs=1e-12)
    assert cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-12)
    assert cosine(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item() == pytest.approx(0.70711, abs=1e-5)


def test_cosine_length_mismatch():
    with pytest.raises(ShapeError):
        cosine(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_cosine_gradient_vanishes_at_maximum():
    c = np.array([0.3, -1.2, 2.0])
    x = leaf(c)
    with Tape() as tape:
        tape.backward(cosine(x, Tensor(c)))
    assert np.all(np.abs(x.grad) <= 1e-9)


def test_cosine_zero_vector_is_zero_not_nan():
    x = leaf([0.0, 0.0])
    with Tape() as tape:
        out = cosine(x, Tensor([1.0, 2.0]))
        tape.backward(out)
    assert out.item() == 0.0
    assert np.all(np.isfinite(x.grad))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)), arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)))
def test_cosine_is_bounded(u, v):
    c = cosine(Tensor(u), Tensor(v)).item()
    assert -1.0 - 1e-9 <= c <= 1.0 + 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_cosine_grad_check(seed):
    r = np.random.default_rng(seed)
    u, v = r.normal(size=(5, 3)), r.normal(size=(1, 3))
    w = r.normal(size=5)
    assert grad_check(lambda a, b: (cosine(a, b, axis=1) * w).sum(), [u, v]) <= 1e-6
    assert grad_check(lambda a: (cosine(a, a[::-1], axis=0) ** 2).sum(), [u]) <= 1e-6


# -- kl_div -----------------------------------------------------------------


def test_kl_examples():
    p = Tensor([0.2, 0.3, 0.5])
    assert abs(kl_div(p, p).item()) <= 1e-9
    assert kl_div(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item() == pytest.approx(0.14384, abs=1e-5)
    assert kl_div(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item() == pytest.approx(0.69315, abs=1e-4)


def test_kl_direct_summation_oracle():
    p, q = np.array([0.1, 0.6, 0.3]), np.array([0.4, 0.4, 0.2])
    expected = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    assert kl_div(Tensor(p), Tensor(q)).item() == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], [0.5, float("nan")]])
def test_kl_rejects_non_distributions(bad):
    with pytest.raises(DomainError):
        kl_div(Tensor(bad), Tensor([0.5, 0.5]))
    with pytest.raises(DomainError):
        kl_div(Tensor([0.5, 0.5]), Tensor(bad))


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        kl_div(Tensor([0.5, 0.5]), Tensor([0.2, 0.3, 0.5]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-5, 5)),
       arrays(np.float64, 6, elements=st.floats(-5, 5)))
def test_kl_nonnegative(a, b):
    p = softmax(Tensor(a)).data
    q = softmax(Tensor(b[: len(a)])).data
    assert kl_div(Tensor(p), Tensor(q)).item() >= -1e-9


def test_kl_detached_target_gets_no_gradient():
    z = leaf([0.3, -0.1, 0.8])
    t = leaf([1.0, 0.0, -1.0])
    with Tape() as tape:
        tape.backward(kl_div(softmax(t).detach(), softmax(z)))
    assert t.grad is not None and np.all(t.grad == 0)
    assert np.any(z.grad != 0)


@pytest.mark.parametrize("seed", range(10))
def test_kl_detached_target_grad_check(seed):
    r = np.random.default_rng(seed)
    p = softmax(Tensor(r.normal(size=4))).detach()
    z = r.normal(size=4)
    assert grad_check(lambda x: kl_div(p, softmax(x)), [z], eps=1e-5) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_kl_both_arguments_grad_check(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    assert grad_check(lambda x, y: kl_div(softmax(x, axis=0), softmax(y, axis=0), axis=0).sum(), [a, b]) <= 1e-6


# -- cross-entropy ----------------------------------------------------------


def test_ce_examples():
    assert cross_entropy(Tensor([[0.0], [0.0]]), np.array([0])).item() == pytest.approx(0.69315, abs=1e-5)
    assert cross_entropy(Tensor([[10.0], [-10.0]]), np.array([0])).item() <= 1e-4


def test_ce_all_ignored_is_zero_with_zero_gradient():
    logits = leaf(rng.normal(size=(3, 2, 2)))
    with Tape() as tape:
        loss = cross_entropy(logits, np.full((2, 2), 255))
        tape.backward(loss)
    assert loss.item() == 0.0
    assert np.all(logits.grad == 0)


def test_ce_ignored_pixels_contribute_nothing():
    logits = leaf(rng.normal(size=(3, 1, 3)))
    labels = np.array([[1, 255, 2]])
    with Tape() as tape:
        loss = cross_entropy(logits, labels)
        tape.backward(loss)
    kept = cross_entropy(Tensor(logits.data[:, :, [0, 2]]), labels[:, [0, 2]])
    assert loss.item() == pytest.approx(kept.item(), abs=1e-12)
    assert np.all(logits.grad[:, 0, 1] == 0)


def test_ce_invalid_label():
    with pytest.raises(DomainError):
        cross_entropy(Tensor(np.zeros((2, 1, 1))), np.array([[2]]))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 1, 2))), np.array([[0]]))


@pytest.mark.parametrize("seed", range(10))
def test_ce_grad_check(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(4, 3, 3))
    labels = r.integers(0, 4, size=(3, 3))
    labels[0, 0] = 255
    assert grad_check(lambda x: cross_entropy(x, labels), [logits]) <= 1e-6


# -- tape -------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf([1.0, -2.0, 3.0])
    with Tape() as tape:
        tape.backward(x.sum())
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_repeated_backward_raises():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        loss = (x * x).sum()
        tape.backward(loss)
        with pytest.raises(StateError):
            tape.backward(loss)


def test_module_level_backward():
    x = leaf([2.0])
    with Tape():
        loss = (x * x).sum()
        backward(loss)
    assert np.array_equal(x.grad, [4.0])
    with pytest.raises(StateError):
        backward(loss)


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        with pytest.raises(ShapeError):
            tape.backward(x * 2.0)


def test_reset_allows_new_recording():
    x = leaf([3.0])
    with Tape() as tape:
        tape.backward((x * x).sum())
        first = x.grad.copy()
        tape.reset()
        tape.backward((x * x * x).sum())
    assert np.array_equal(first, [6.0])
    assert np.array_equal(x.grad, [27.0])


def test_grad_shape_matches_data():
    xs = [leaf(rng.normal(size=s)) for s in [(2, 3), (3,), (1, 3)]]
    with Tape() as tape:
        tape.backward((xs[0] * xs[1] + xs[2]).sum())
    for x in xs:
        assert x.grad.shape == x.data.shape


def test_unreached_leaf_gets_zero_grad():
    x, y = leaf([1.0]), leaf([2.0, 3.0])
    with Tape() as tape:
        _ = y * 2.0  # recorded, but not part of the loss
        tape.backward(x.sum())
    assert np.array_equal(y.grad, [0.0, 0.0])


def test_shared_subexpression_accumulates():
    x = leaf([2.0])
    with Tape() as tape:
        y = x * x
        tape.backward((y + y * 3.0).sum())
    assert np.array_equal(x.grad, [16.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with Tape() as tape:
        with no_grad():
            y = x * 2.0
        assert len(tape) == 0
    assert not y.requires_grad


def test_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_tape_replay_bit_identical():
    def run():
        r = np.random.default_rng(11)
        a, b = leaf(r.normal(size=(4, 3))), leaf(r.normal(size=(3, 2)))
        with Tape() as tape:
            tape.backward(softmax(matmul(a, b), axis=0).sum() + cosine(a, a[::-1], axis=1).sum())
        return a.grad, b.grad

    g1, g2 = run(), run()
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


# -- grad_check ---------------------------------------------------------------


def test_grad_check_square():
    assert grad_check(lambda x: (x * x).sum(), [np.array([3.0])]) <= 1e-6


def test_grad_check_rejects_non_scalar():
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * 2.0, [np.ones(3)])


def test_grad_check_reports_location_of_wrong_gradient():
    from magseg.tensor import _make

    def bad_square(x):
        return _make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,))

    r = grad_check_report(lambda x: bad_square(x).sum(), [np.array([1.0, 2.0])])
    assert r.max_error > 0.1
    assert r.input_index == 0


def test_grad_check_leaves_inputs_untouched():
    a = rng.normal(size=(2, 2))
    before = a.copy()
    grad_check(lambda x: (x * x).sum(), [a])
    assert np.array_equal(a, before)
