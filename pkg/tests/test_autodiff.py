import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from praclab import autodiff as ad
from praclab.autodiff import Tensor


def grad_of(f, x):
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with ad.Tape():
        out = f(leaf)
    ad.backward(out)
    return leaf.grad


def test_square_sum_gradient():
    g = grad_of(lambda x: ad.sum_(ad.mul(x, x)), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(g, [2.0, 4.0, 6.0])


@pytest.mark.parametrize("name,f", [
    ("exp-log", lambda x: ad.sum_(ad.log(ad.add(ad.exp(x), 1.0)))),
    ("gelu", lambda x: ad.sum_(ad.gelu(x))),
    ("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(ad.reshape(x, (3, 4))), Tensor(np.arange(12.0).reshape(3, 4))))),
    ("log_softmax", lambda x: ad.index(ad.log_softmax(ad.reshape(x, (2, 6))), (1, 3))),
    ("layer_norm", lambda x: ad.sum_(ad.mul(
        ad.layer_norm(ad.reshape(x, (3, 4)), Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.zeros(4))),
        Tensor(np.arange(12.0).reshape(3, 4))))),
    ("matmul-transpose", lambda x: ad.sum_(ad.matmul(ad.reshape(x, (3, 4)), ad.transpose(ad.reshape(x, (3, 4)), (1, 0))))),
    ("div", lambda x: ad.sum_(ad.div(x, ad.add(ad.mul(x, x), 1.0)))),
    ("concat-index", lambda x: ad.sum_(ad.index(ad.concat([x, ad.scale(x, 2.0)]), [0, 0, 13, 5]))),
])
def test_finite_differences(name, f):
    with ad.precision(np.float64):
        x = np.random.default_rng(0).normal(size=12)
        assert ad.finite_difference_check(f, x, h=1e-5) < 1e-6


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 6), elements=st.floats(-3, 3)))
def test_elementwise_composite_matches_numeric(x):
    f = lambda t: ad.sum_(ad.mul(ad.gelu(t), ad.exp(ad.scale(t, 0.3))))
    with ad.precision(np.float64):
        assert ad.finite_difference_check(f, x, h=1e-6) < 1e-4


def test_softmax_mask_gives_exact_zeros_and_unit_rows():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 4)))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = ad.softmax(x, mask=mask).data
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


def test_tape_is_single_use():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.sum_(ad.mul(x, x))
    ad.backward(y)
    with pytest.raises(ad.TapeError):
        ad.backward(y)


def test_backward_rejects_detached_and_non_scalar():
    with pytest.raises(ad.TapeError):
        ad.backward(ad.sum_(Tensor(np.ones(3))))
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape():
        y = ad.mul(x, x)
    with pytest.raises(ad.ShapeError):
        ad.backward(y)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            ad.mul(x, x)
    assert len(tape) == 0


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.embedding(Tensor(np.ones((4, 2))), np.array([4]))


def test_repeated_advanced_index_accumulates():
    g = grad_of(lambda x: ad.sum_(ad.index(x, [1, 1, 2])), [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(g, [0.0, 2.0, 1.0])


def test_embedding_gradient_scatters():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    with ad.Tape():
        out = ad.sum_(ad.embedding(table, np.array([[0, 2, 2]])))
    ad.backward(out)
    np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])


def test_paste_gradient_only_reaches_patch():
    base = np.zeros((6, 6, 3))
    patch = Tensor(np.ones((2, 2, 3)), requires_grad=True)
    with ad.Tape():
        canvas = ad.paste(base, patch, 1, 3)
        loss = ad.sum_(ad.mul(canvas, Tensor(np.arange(108.0).reshape(6, 6, 3))))
    ad.backward(loss)
    expected = np.arange(108.0).reshape(6, 6, 3)[1:3, 3:5]
    np.testing.assert_array_equal(patch.grad, expected)
    with pytest.raises(ad.ShapeError):
        ad.paste(base, patch, 5, 5)


def test_adam_reduces_quadratic():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    state = ad.AdamState(lr=0.1)
    for _ in range(200):
        with ad.Tape():
            loss = ad.sum_(ad.mul(w, w))
        ad.backward(loss)
        ad.adam_step([w], [w.grad], state)
    assert np.abs(w.data).max() < 0.05
