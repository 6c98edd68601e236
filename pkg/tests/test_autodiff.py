"""Every op is checked against central finite differences."""

import numpy as np
import pytest

from diffpolicy import autodiff as ad

RNG = np.random.default_rng(20240611)
H = 1e-6


def fd_grad(f, x: np.ndarray) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + H
        fp = f(x)
        flat[i] = orig - H
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * H)
    return g


def check_unary(op, x: np.ndarray, atol: float = 1e-7) -> None:
    t = ad.Tensor(x.copy(), requires_grad=True)
    loss = ad.tensor_sum(ad.mul(op(t), np.arange(1.0, x.size + 1).reshape(x.shape)))
    loss.backward()

    def scalar(v):
        w = np.arange(1.0, v.size + 1).reshape(v.shape)
        return float((op(ad.Tensor(v)).data * w).sum())

    np.testing.assert_allclose(t.grad, fd_grad(scalar, x.copy()), atol=atol)


@pytest.mark.parametrize(
    "op",
    [
        ad.exp,
        ad.log,
        ad.tanh,
        ad.relu,
        ad.softmax,
        ad.log_softmax,
        ad.layer_norm,
        lambda t: ad.clip(t, 0.8, 2.5),
    ],
    ids=["exp", "log", "tanh", "relu", "softmax", "log_softmax", "layer_norm", "clip"],
)
def test_unary_ops_match_finite_differences(op):
    x = RNG.uniform(0.5, 3.0, size=(3, 4))
    check_unary(op, x)


@pytest.mark.parametrize(
    "op",
    [ad.add, ad.sub, ad.mul, ad.div, ad.minimum, ad.maximum],
    ids=["add", "sub", "mul", "div", "minimum", "maximum"],
)
def test_binary_ops_match_finite_differences(op):
    x = RNG.uniform(0.5, 2.0, size=(3, 4))
    y = RNG.uniform(0.5, 2.0, size=(3, 4))
    tx = ad.Tensor(x.copy(), requires_grad=True)
    ty = ad.Tensor(y.copy(), requires_grad=True)
    ad.tensor_sum(ad.mul(op(tx, ty), 2.0)).backward()

    def fx(v):
        return float((op(ad.Tensor(v), ad.Tensor(y)).data * 2.0).sum())

    def fy(v):
        return float((op(ad.Tensor(x), ad.Tensor(v)).data * 2.0).sum())

    np.testing.assert_allclose(tx.grad, fd_grad(fx, x.copy()), atol=1e-7)
    np.testing.assert_allclose(ty.grad, fd_grad(fy, y.copy()), atol=1e-7)


def test_broadcasting_sums_gradients():
    row = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    block = ad.Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    (block + row).sum().backward()
    np.testing.assert_array_equal(row.grad, [4.0, 4.0, 4.0])
    np.testing.assert_array_equal(block.grad, np.ones((4, 3)))


def test_matmul_with_batched_left_operand():
    a = RNG.normal(size=(2, 3, 4))
    b = RNG.normal(size=(4, 5))
    ta = ad.Tensor(a.copy(), requires_grad=True)
    tb = ad.Tensor(b.copy(), requires_grad=True)
    ad.tensor_sum(ad.matmul(ta, tb)).backward()

    def fa(v):
        return float((v @ b).sum())

    def fb(v):
        return float((a @ v).sum())

    np.testing.assert_allclose(ta.grad, fd_grad(fa, a.copy()), atol=1e-6)
    np.testing.assert_allclose(tb.grad, fd_grad(fb, b.copy()), atol=1e-6)


def test_embedding_scatter_adds_repeated_rows():
    table = ad.Tensor(RNG.normal(size=(5, 3)), requires_grad=True)
    idx = np.array([1, 1, 4])
    out = ad.embedding(table, idx)
    ad.tensor_sum(ad.mul(out, np.array([[1.0], [2.0], [3.0]]))).backward()
    expected = np.zeros((5, 3))
    expected[1] = 3.0  # 1 + 2 from the duplicated row
    expected[4] = 3.0
    np.testing.assert_array_equal(table.grad, expected)


def test_take_along_last_selects_and_scatters():
    a = ad.Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    idx = RNG.integers(0, 4, size=(2, 3))
    out = ad.take_along_last(a, idx)
    assert out.shape == (2, 3)
    for i in range(2):
        for j in range(3):
            assert out.data[i, j] == a.data[i, j, idx[i, j]]
    out.sum().backward()
    assert a.grad.sum() == 6.0
    assert np.count_nonzero(a.grad) == 6


def test_reshape_permute_narrow_roundtrip_gradients():
    a = ad.Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    out = ad.narrow_last(ad.permute(ad.reshape(a, (6, 4)).reshape(2, 3, 4), (1, 0, 2)), 1, 2)
    out.sum().backward()
    expected = np.zeros((2, 3, 4))
    expected[:, :, 1:3] = 1.0
    np.testing.assert_array_equal(a.grad, expected)


def test_mean_gradient_scales_by_count():
    a = ad.Tensor(np.ones((4, 5)), requires_grad=True)
    a.mean().backward()
    np.testing.assert_allclose(a.grad, np.full((4, 5), 1.0 / 20.0))


def test_diamond_graph_accumulates_both_paths():
    x = ad.Tensor(np.array(2.0), requires_grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    y.backward()
    assert x.grad == pytest.approx(7.0)


def test_repeated_backward_accumulates_into_grad():
    x = ad.Tensor(np.array(1.5), requires_grad=True)
    (x * 2.0).backward()
    (x * 2.0).backward()
    assert x.grad == pytest.approx(4.0)


def test_constants_do_not_track():
    c = ad.Tensor(np.ones(3))
    out = c * 2.0
    assert not out.requires_grad
    with pytest.raises(ValueError):
        out.backward()


def test_backward_requires_scalar_or_seed():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(ValueError):
        y.backward()
    y.backward(seed=np.array([1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 4.0])


def test_minimum_tie_goes_to_first_argument():
    a = ad.Tensor(np.array([1.0, 5.0]), requires_grad=True)
    b = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.minimum(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 1.0])


def test_log_softmax_rows_normalize():
    x = RNG.normal(size=(6, 9)) * 30.0  # large logits: stability check
    out = ad.log_softmax(ad.Tensor(x))
    np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), np.ones(6), atol=1e-12)
    assert np.all(np.isfinite(out.data))
