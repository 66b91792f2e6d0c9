import numpy as np
import pytest

from composelab import autodiff as ad
from composelab.autodiff import Tensor


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# creation

def test_zeros():
    t = ad.create([2, 2], "zeros")
    assert t.data.tolist() == [[0.0, 0.0], [0.0, 0.0]]


def test_ones_sum():
    assert ad.rsum(ad.ones([3])).item() == 3.0


def test_normal_deterministic():
    a = ad.normal([4], seed=7)
    b = ad.normal([4], seed=7)
    assert np.array_equal(a.data, b.data)


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        ad.create([2, 0], "zeros")


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    a = Tensor(rng(0).standard_normal((2, 3)))
    eye = Tensor(np.eye(2))
    out = ad.matmul(eye, a)
    assert np.allclose(out.data, a.data)


def test_matmul_hand_case():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_grad_is_column_sums():
    # d/dA sum(A @ B) broadcasts B's column sums across A's rows
    a = Tensor(rng(1).standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng(2).standard_normal((4, 5)))
    ad.rsum(ad.matmul(a, b)).backward()
    expected = np.tile(b.data.sum(axis=1), (3, 1))
    assert np.allclose(a.grad, expected)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_batched_matches_loop():
    g = rng(3)
    a = g.standard_normal((5, 2, 3))
    b = g.standard_normal((5, 3, 4))
    out = ad.matmul(Tensor(a), Tensor(b))
    for i in range(5):
        assert np.allclose(out.data[i], a[i] @ b[i])


def test_matmul_shared_rhs_grad():
    g = rng(4)
    a = Tensor(g.standard_normal((5, 2, 3)), requires_grad=True)
    w = Tensor(g.standard_normal((3, 4)), requires_grad=True)
    weights = g.standard_normal((5, 2, 4))

    def f(t):
        return ad.rsum(ad.mul(ad.matmul(t, w), Tensor(weights)))

    assert ad.finite_diff_check(f, a) < 1e-6

    w.zero_grad()
    ad.rsum(ad.mul(ad.matmul(a, w), Tensor(weights))).backward()
    num = np.zeros_like(w.data)
    step = 1e-6
    for i in range(w.data.size):
        wp = w.data.copy().reshape(-1)
        wp[i] += step
        hi = ((a.data @ wp.reshape(w.shape)) * weights).sum()
        wp[i] -= 2 * step
        lo = ((a.data @ wp.reshape(w.shape)) * weights).sum()
        num.reshape(-1)[i] = (hi - lo) / (2 * step)
    assert np.allclose(w.grad, num, atol=1e-6)


# ---------------------------------------------------------------------------
# softmax

def test_softmax_constant_is_uniform():
    out = ad.softmax(Tensor([3.0, 3.0, 3.0, 3.0]), axis=0)
    assert np.allclose(out.data, 0.25)


def test_softmax_closed_form():
    out = ad.softmax(Tensor([0.0, np.log(3.0)]), axis=0)
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)


def test_softmax_rows_sum_to_one():
    for seed in range(20):
        x = rng(seed).standard_normal((4, 7)) * 10.0
        out = ad.softmax(Tensor(x), axis=1)
        assert np.all(np.abs(out.data.sum(axis=1) - 1.0) <= 1e-12)


def test_softmax_gradient():
    for seed in range(5):
        g = rng(100 + seed)
        w = g.standard_normal((6,))
        x = Tensor(g.standard_normal((6,)))

        def f(t):
            return ad.rsum(ad.mul(ad.softmax(t, axis=0), Tensor(w)))

        assert ad.finite_diff_check(f, x) < 1e-6


# ---------------------------------------------------------------------------
# reductions

def test_max_routes_grad_to_witness():
    x = Tensor([1.0, 5.0, 3.0], requires_grad=True)
    out = ad.rmax(x)
    assert out.item() == 5.0
    out.backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_min_tie_breaks_to_lowest_index():
    x = Tensor([2.0, 2.0, 2.0], requires_grad=True)
    ad.rmin(x).backward()
    assert x.grad.tolist() == [1.0, 0.0, 0.0]


def test_mean_backward_uniform():
    x = Tensor(rng(5).standard_normal((4, 3)), requires_grad=True)
    ad.rmean(x).backward()
    assert np.allclose(x.grad, 1.0 / 12.0)


def test_axis_reduction_max_grad():
    x = Tensor([[1.0, 4.0], [7.0, 2.0]], requires_grad=True)
    ad.rsum(ad.rmax(x, axis=1)).backward()
    assert x.grad.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_empty_reduction_rejected():
    with pytest.raises(ValueError):
        ad.rsum(Tensor(np.zeros((2,))), axis=3)


# ---------------------------------------------------------------------------
# elementwise

def test_div_by_exact_zero_raises():
    with pytest.raises(ZeroDivisionError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_scalar_broadcast():
    x = Tensor(np.full((2, 2), 3.0), requires_grad=True)
    out = ad.rsum(ad.mul(x, 2.0))
    out.backward()
    assert out.item() == 24.0
    assert np.allclose(x.grad, 2.0)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "silu", "sqrt"])
def test_elementwise_gradients(op):
    for seed in range(5):
        g = rng(1000 + seed)
        w = g.standard_normal((3, 3))
        b = Tensor(g.standard_normal((3, 3)) + 3.0)  # keep div/sqrt away from 0
        x0 = Tensor(g.standard_normal((3, 3)) + 3.0)

        def f(t):
            if op == "add":
                y = ad.add(t, b)
            elif op == "sub":
                y = ad.sub(t, b)
            elif op == "mul":
                y = ad.mul(t, b)
            elif op == "div":
                y = ad.div(t, b)
            elif op == "silu":
                y = ad.silu(t)
            else:
                y = ad.sqrt(t)
            return ad.rsum(ad.mul(y, Tensor(w)))

        assert ad.finite_diff_check(f, x0) < 1e-6


# ---------------------------------------------------------------------------
# smoothing convolution

def test_conv_delta_kernel_is_identity():
    x = Tensor(rng(6).standard_normal((5, 5)))
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    out = ad.conv2d_fixed(x, k)
    assert np.allclose(out.data, x.data)


def test_conv_constant_input_preserved():
    # normalized kernel on a constant field changes nothing
    k = rng(7).random((3, 3))
    k /= k.sum()
    out = ad.conv2d_fixed(Tensor(np.full((4, 4), 0.7)), k)
    assert np.allclose(out.data, 0.7)


def test_conv_uniform_kernel_on_one_hot():
    x = np.zeros((5, 5))
    x[2, 2] = 1.0
    out = ad.conv2d_fixed(Tensor(x), np.full((3, 3), 1.0 / 9.0))
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0 / 9.0
    assert np.allclose(out.data, expected)


def test_conv_even_kernel_rejected():
    with pytest.raises(ValueError):
        ad.conv2d_fixed(Tensor(np.zeros((4, 4))), np.zeros((2, 2)))


def test_conv_gradient_with_replicate_padding():
    for seed in range(3):
        g = rng(2000 + seed)
        k = g.random((3, 3))
        k /= k.sum()
        w = g.standard_normal((6, 6))
        x0 = Tensor(g.standard_normal((6, 6)))

        def f(t):
            return ad.rsum(ad.mul(ad.conv2d_fixed(t, k), Tensor(w)))

        assert ad.finite_diff_check(f, x0) < 1e-6


# ---------------------------------------------------------------------------
# plumbing ops

def test_reshape_transpose_roundtrip_grad():
    x = Tensor(rng(8).standard_normal((2, 3, 4)), requires_grad=True)
    y = ad.transpose(ad.reshape(x, (6, 4)), (1, 0))
    ad.rsum(ad.mul(y, y)).backward()
    assert np.allclose(x.grad, 2.0 * x.data)


def test_expand_backward_sums():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ad.expand(x, 0, 5)
    assert y.shape == (5, 2)
    ad.rsum(y).backward()
    assert x.grad.tolist() == [5.0, 5.0]


def test_bias_add_grad():
    g = rng(9)
    x = Tensor(g.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(g.standard_normal((3,)), requires_grad=True)
    ad.rsum(ad.bias_add(x, b)).backward()
    assert np.allclose(x.grad, 1.0)
    assert np.allclose(b.grad, 4.0)


def test_take_scatters_gradient():
    x = Tensor(rng(10).standard_normal((3, 4)), requires_grad=True)
    ad.rsum(ad.take(x, 2, axis=1)).backward()
    expected = np.zeros((3, 4))
    expected[:, 2] = 1.0
    assert np.allclose(x.grad, expected)


def test_stack_splits_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    s = ad.stack([a, b])
    ad.rsum(ad.mul(s, Tensor([[1.0, 1.0], [2.0, 2.0]]))).backward()
    assert a.grad.tolist() == [1.0, 1.0]
    assert b.grad.tolist() == [2.0, 2.0]


# ---------------------------------------------------------------------------
# backward mechanics

def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(x, 2.0).backward()


def test_backward_is_additive():
    g = rng(11)
    base = g.standard_normal((3,))

    def grad_of(fn):
        x = Tensor(base.copy(), requires_grad=True)
        fn(x).backward()
        return x.grad

    gf = grad_of(lambda x: ad.rsum(ad.mul(x, x)))
    gg = grad_of(lambda x: ad.rsum(ad.silu(x)))
    gfg = grad_of(lambda x: ad.add(ad.rsum(ad.mul(x, x)), ad.rsum(ad.silu(x))))
    assert np.allclose(gfg, gf + gg, atol=1e-12)


def test_grad_accumulates_across_uses():
    x = Tensor([2.0], requires_grad=True)
    y = ad.add(ad.mul(x, 3.0), ad.mul(x, 4.0))
    ad.rsum(y).backward()
    assert x.grad.tolist() == [7.0]


def test_no_grad_suppresses_graph():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_ops_deterministic():
    g = rng(12)
    a, b = g.standard_normal((8, 8)), g.standard_normal((8, 8))
    r1 = ad.matmul(Tensor(a), Tensor(b)).data
    r2 = ad.matmul(Tensor(a.copy()), Tensor(b.copy())).data
    assert r1.tobytes() == r2.tobytes()


# ---------------------------------------------------------------------------
# adam

def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    before = p.data.copy()
    ad.adam_step({"p": p}, ad.AdamState(), lr=0.1)
    assert np.array_equal(p.data, before)


def test_adam_first_step_is_signed_lr():
    # closed form: with eps -> 0 the first update is exactly lr * sign(g)
    p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0, 1e-4])
    ad.adam_step({"p": p}, ad.AdamState(eps=1e-16), lr=0.01)
    assert np.allclose(p.data, [1.0 - 0.01, 1.0 + 0.01, 1.0 - 0.01], atol=1e-10)


def test_adam_deterministic_state():
    def run():
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        st = ad.AdamState()
        for _ in range(2):
            p.grad = np.array([0.3, -0.7])
            ad.adam_step({"p": p}, st, lr=0.05)
        return p.data.tobytes(), st.m["p"].tobytes(), st.v["p"].tobytes()

    assert run() == run()


def test_adam_nan_gradient_raises():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        ad.adam_step({"p": p}, ad.AdamState(), lr=0.1)
