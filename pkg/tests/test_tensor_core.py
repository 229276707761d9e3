import numpy as np
import pytest

from kernelnorm import ops
from kernelnorm.autograd import GraphError, Tensor, backward, no_grad
from kernelnorm.rng import Rng, dropout_mask
from kernelnorm.verify import _grad_cases, gradcheck, rel_dev


def conv_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for y in range(oh):
                for z in range(ow):
                    acc = b[o] if b is not None else 0.0
                    for ch in range(c):
                        for a in range(kh):
                            for q in range(kw):
                                acc += xp[i, ch, y * stride + a, z * stride + q] * w[o, ch, a, q]
                    out[i, o, y, z] = acc
    return out


# ---------------------------------------------------------------- pad / crop

def test_pad2d_ones_border_zero():
    out = ops.pad2d(Tensor(np.ones((1, 1, 2, 2))), 1, 1).data
    assert out.shape == (1, 1, 4, 4)
    assert np.all(out[0, 0, 1:3, 1:3] == 1)
    assert out.sum() == 4


def test_pad2d_zero_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 5)))
    assert np.array_equal(ops.pad2d(x, 0, 0).data, x.data)


def test_pad2d_shape():
    assert ops.pad2d(Tensor(np.zeros((2, 3, 5, 7))), 2, 1).shape == (2, 3, 9, 9)


def test_pad2d_negative_rejected():
    with pytest.raises(ValueError):
        ops.pad2d(Tensor(np.zeros((1, 1, 2, 2))), -1, 0)


def test_pad_then_crop_identity():
    x = np.random.default_rng(1).standard_normal((2, 3, 4, 6))
    assert np.array_equal(ops.crop2d(ops.pad2d(Tensor(x), 2, 3), 2, 3).data, x)


# ---------------------------------------------------------------- unfold

def test_unfold_full_cover():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    win = ops.unfold(Tensor(x), 3, 1)
    assert win.shape == (1, 1, 1, 3, 3)
    assert np.array_equal(win[0, 0], x[0])


def test_unfold_exact_tiling():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    win = ops.unfold(Tensor(x), 2, 2)
    assert win.shape[1] == 4
    assert sorted(win.reshape(-1).tolist()) == list(range(16))


def test_unfold_index_oracle():
    x = np.random.default_rng(2).standard_normal((1, 2, 5, 5))
    win = ops.unfold(Tensor(x), 3, 2)
    assert win.shape == (1, 4, 2, 3, 3)
    for idx, (i, j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        assert np.array_equal(win[0, idx], x[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3])


def test_unfold_kernel_too_large():
    with pytest.raises(ValueError, match="kernel exceeds input extent"):
        ops.unfold(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


def test_unfold_dot_reproduces_conv():
    g = np.random.default_rng(3)
    x, w = g.standard_normal((2, 3, 6, 6)), g.standard_normal((4, 3, 3, 3))
    win = ops.unfold(Tensor(x), 3, 1)
    manual = np.einsum("nlckq,fckq->nfl", win, w).reshape(2, 4, 4, 4)
    assert np.allclose(manual, ops.conv2d(Tensor(x), Tensor(w)).data, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- conv2d

def test_conv_zero_weights_gives_bias():
    out = ops.conv2d(Tensor(np.random.default_rng(0).standard_normal((1, 2, 5, 5))),
                     Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.array([1.0, -2.0, 0.5])), 1, 1).data
    assert np.all(out[0, 0] == 1.0) and np.all(out[0, 1] == -2.0) and np.all(out[0, 2] == 0.5)


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 4))
    assert np.array_equal(ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    g = np.random.default_rng(stride * 10 + pad)
    x, w, b = g.standard_normal((2, 3, 8, 8)), g.standard_normal((4, 3, 3, 3)), g.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    assert rel_dev(got, conv_loops(x, w, b, stride, pad)) <= 1e-6


def test_conv_linear_in_input_and_weights():
    g = np.random.default_rng(4)
    x, y = g.standard_normal((2, 3, 6, 6)), g.standard_normal((2, 3, 6, 6))
    w, v = g.standard_normal((2, 3, 3, 3)), g.standard_normal((2, 3, 3, 3))
    conv = lambda a, k: ops.conv2d(Tensor(a), Tensor(k), None, 1, 1).data  # noqa: E731
    assert rel_dev(conv(2 * x - 3 * y, w), 2 * conv(x, w) - 3 * conv(y, w)) <= 1e-6
    assert rel_dev(conv(x, 0.5 * w + v), 0.5 * conv(x, w) + conv(x, v)) <= 1e-6


def test_conv_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="kernel exceeds padded input"):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))), padding=1)


# ---------------------------------------------------------------- other ops

def test_pools():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(ops.maxpool2d(Tensor(x), 2).data[0, 0], [[5, 7], [13, 15]])
    assert np.array_equal(ops.avgpool2d(Tensor(x), 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    assert ops.adaptive_avg_pool2d(Tensor(np.ones((2, 3, 8, 8))), (2, 2)).shape == (2, 3, 2, 2)
    ad = ops.adaptive_avg_pool2d(Tensor(x), (1, 1)).data
    assert ad.item() == pytest.approx(7.5)


def test_mish_values():
    x = np.array([-2.0, 0.0, 1.0, 30.0, -40.0])
    ref = x * np.tanh(np.log1p(np.exp(x)))
    assert np.allclose(ops.mish(Tensor(x)).data, ref, rtol=1e-12, atol=1e-15)


def test_cross_entropy_matches_formula():
    z = np.array([[1.0, 2.0, 0.5], [1000.0, 0.0, -1000.0]])
    y = np.array([1, 0])
    p = np.exp(z[0] - z[0].max()) / np.exp(z[0] - z[0].max()).sum()
    want = (-np.log(p[1]) + 0.0) / 2
    assert float(ops.cross_entropy(Tensor(z), y).data) == pytest.approx(want, rel=1e-12)


def test_linear_shape():
    out = ops.linear(Tensor(np.ones((2, 5))), Tensor(np.ones((3, 5))), Tensor(np.zeros(3)))
    assert out.shape == (2, 3) and np.all(out.data == 5)


# ---------------------------------------------------------------- autograd

def test_backward_identity_leaf():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    assert np.array_equal(backward(x)[x], np.ones((2, 3)))


def test_backward_quadratic():
    xv = np.random.default_rng(1).standard_normal((3, 4))
    x = Tensor(xv, requires_grad=True)
    assert np.allclose(backward(ops.sum(ops.mul(x, x)))[x], 2 * xv)


def test_backward_linearity_of_outputs():
    g = np.random.default_rng(2)
    x = Tensor(g.standard_normal((2, 3)), requires_grad=True)
    f1 = lambda: ops.sum(ops.mish(x))  # noqa: E731
    f2 = lambda: ops.sum(ops.square(x))  # noqa: E731
    both = backward(ops.add(f1(), f2()))[x]
    assert np.allclose(both, backward(f1())[x] + backward(f2())[x])


def test_backward_seed_shape_mismatch():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="seed"):
        backward(ops.square(x), np.ones(3))


def test_backward_vjp_shape_mismatch():
    from kernelnorm.autograd import make_node

    x = Tensor(np.ones((2, 2)), requires_grad=True)
    bad = make_node(np.ones(2), (x,), lambda g: (np.ones(5),), "bad")
    with pytest.raises(ValueError, match="shape mismatch"):
        backward(bad)


def test_backward_cycle_detected():
    from kernelnorm.autograd import make_node

    x = Tensor(np.ones(2), requires_grad=True)
    a = make_node(np.ones(2), (x,), lambda g: (g,), "a")
    b = make_node(np.ones(2), (a,), lambda g: (g,), "b")
    a.parents = (b,)
    with pytest.raises(GraphError, match="cycle"):
        backward(b)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.square(x)
    assert not y.requires_grad and backward(y) == {}


@pytest.mark.parametrize("case", list(_grad_cases()), ids=lambda c: c[0])
def test_finite_differences(case):
    name, fn, inputs, wrt = case
    assert max(x.size for x in inputs) <= 1000
    assert gradcheck(fn, inputs, wrt=wrt) <= 1e-5


def test_composite_graph_fd():
    g = np.random.default_rng(5)

    def net(x, w, v):
        h = ops.mish(ops.conv2d(x, w, None, 1, 1))
        h = ops.maxpool2d(h, 2)
        return ops.cross_entropy(ops.linear(ops.flatten(h), v), np.array([1, 0]))

    err = gradcheck(net, [g.standard_normal((2, 2, 4, 4)), g.standard_normal((3, 2, 3, 3)),
                          g.standard_normal((2, 12))])
    assert err <= 1e-5


# ---------------------------------------------------------------- rng

def test_rng_streams_reproducible():
    a = dropout_mask(Rng(11), 0.3, (4, 3, 5, 5), (2, 7))
    b = dropout_mask(Rng(11), 0.3, (4, 3, 5, 5), (2, 7))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, dropout_mask(Rng(11), 0.3, (4, 3, 5, 5), (2, 8)))


def test_dropout_mask_inverted_scaling():
    m = dropout_mask(Rng(0), 0.25, (2, 100, 10, 10))
    assert set(np.unique(m)) <= {0.0, 1.0 / 0.75}
    assert abs((m == 0).mean() - 0.25) < 0.02
    plain = dropout_mask(Rng(0), 0.25, (1, 4, 4, 4), inverted=False)
    assert set(np.unique(plain)) <= {0.0, 1.0}


def test_dropout_mask_rows_keyed_by_sample():
    full = dropout_mask(Rng(5), 0.5, (3, 2, 4, 4), (1, 0), sample_ids=[10, 11, 12])
    solo = dropout_mask(Rng(5), 0.5, (1, 2, 4, 4), (1, 0), sample_ids=[11])
    assert np.array_equal(full[1], solo[0])


def test_dropout_mask_rejects_p_one():
    with pytest.raises(ValueError):
        dropout_mask(Rng(0), 1.0, (1, 1, 1, 1))
