import numpy as np
import pytest

from sparsect import tensor as T


def finite_diff_grad(fn, x, h=1e-5):
    """Central-difference gradient of scalar fn w.r.t. every entry of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn()
        flat[i] = orig - h
        lo = fn()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def check_grads(build, params, rtol=1e-4):
    """Compare reverse-mode grads of build(params) against finite differences.

    ``build`` returns a scalar Tensor from the given parameter Tensors; the
    oracle re-evaluates the forward pass only, so it is independent of the
    backward implementation.
    """
    loss = build()
    loss.backward()
    got = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, g in zip(params, got):
        fd = finite_diff_grad(lambda: build().item(), p.data)
        denom = np.maximum(np.abs(fd), 1.0)
        err = np.max(np.abs(g - fd) / denom)
        assert err <= rtol, f"gradient mismatch for {p.op}: max rel err {err:.3e}"


def rand_param(rng, *shape):
    return T.parameter(rng.standard_normal(shape))


# ---------------------------------------------------------------------------
# forward examples


def test_conv2d_zero_input_gives_zero():
    x = T.constant(np.zeros((1, 1, 3, 3)))
    k = T.parameter(np.random.default_rng(0).standard_normal((2, 1, 3, 3)))
    b = T.parameter(np.zeros(2))
    out = T.conv2d(x, k, b, padding="same")
    assert np.all(out.data == 0.0)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = T.constant(rng.standard_normal((1, 1, 4, 5)))
    k = T.constant(np.ones((1, 1, 1, 1)))
    b = T.constant(np.zeros(1))
    out = T.conv2d(x, k, b, padding="same")
    assert np.array_equal(out.data, x.data)


def test_conv2d_valid_all_ones_sums_entries():
    x = T.constant(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
    k = T.constant(np.ones((1, 1, 3, 3)))
    b = T.constant(np.zeros(1))
    out = T.conv2d(x, k, b, padding="valid")
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 45.0  # hand sum of 1..9


def test_conv2d_shape_errors():
    x = T.constant(np.zeros((1, 2, 4, 4)))
    k = T.constant(np.zeros((1, 3, 3, 3)))
    b = T.constant(np.zeros(1))
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(x, k, b)
    with pytest.raises(ValueError, match="odd"):
        T.conv2d(x, T.constant(np.zeros((1, 2, 2, 2))), b)


def test_relu_and_leaky():
    x = T.constant(np.array([[[[-1.0, 0.0, 2.0]]]]))
    assert np.array_equal(T.relu(x).data.ravel(), [0.0, 0.0, 2.0])
    pos = T.constant(np.array([[[[0.5, 3.0]]]]))
    assert np.array_equal(T.relu(pos).data, pos.data)
    assert np.allclose(T.leaky_relu(T.constant(np.array([[[[-2.0]]]])), 0.1).data, -0.2)


def test_avg_pool2_block_mean_and_shapes():
    c = T.constant(np.full((1, 1, 4, 4), 3.5))
    assert np.all(T.avg_pool2(c).data == 3.5)
    blk = T.constant(np.array([[[[0.0, 0.0], [0.0, 4.0]]]]))
    assert T.avg_pool2(blk).data[0, 0, 0, 0] == 1.0
    x = T.constant(np.zeros((1, 1, 8, 8)))
    assert T.avg_pool2(T.avg_pool2(x)).shape == (1, 1, 2, 2)
    with pytest.raises(ValueError, match="even"):
        T.avg_pool2(T.constant(np.zeros((1, 1, 3, 4))))


def test_upsample_nearest2():
    one = T.constant(np.full((1, 1, 1, 1), 5.0))
    up = T.upsample_nearest2(one)
    assert up.shape == (1, 1, 2, 2) and np.all(up.data == 5.0)
    rng = np.random.default_rng(2)
    x = T.constant(rng.standard_normal((2, 3, 4, 4)))
    assert T.upsample_nearest2(x).shape == (2, 3, 8, 8)
    # avg_pool2 is the exact inverse of nearest upsampling
    assert np.array_equal(T.avg_pool2(T.upsample_nearest2(x)).data, x.data)


def test_concat_add_mse():
    rng = np.random.default_rng(3)
    a = T.constant(rng.standard_normal((1, 3, 4, 4)))
    b = T.constant(rng.standard_normal((1, 1, 4, 4)))
    assert T.concat_channels(a, b).shape == (1, 4, 4, 4)
    x = T.constant(rng.standard_normal((2, 2)))
    assert T.mse(x, x).item() == 0.0
    assert T.mse(T.constant(np.zeros(2)), T.constant(np.array([2.0, 2.0]))).item() == 4.0
    with pytest.raises(ValueError, match="mismatch"):
        T.add(a, b)
    with pytest.raises(ValueError, match="mismatch"):
        T.mse(a, b)


def test_backward_requires_scalar():
    x = T.parameter(np.ones((2, 2)))
    y = T.add(x, x)
    with pytest.raises(ValueError, match="scalar"):
        y.backward()


def test_backward_simple_square():
    w = T.parameter(np.array(3.0))
    loss = T.mse(w, T.constant(np.array(0.0)))
    loss.backward()
    assert loss.item() == 9.0
    assert w.grad == 6.0  # d/dw w^2


def test_backward_unused_parameter_gets_no_grad():
    w = T.parameter(np.array([1.0]))
    p = T.parameter(np.array([2.0]))
    loss = T.mse(w, T.constant(np.array([0.0])))
    loss.backward()
    assert p.grad is None


def test_fanout_grads_accumulate():
    rng = np.random.default_rng(4)
    x = T.parameter(rng.standard_normal((1, 1, 4, 4)))
    tgt = T.constant(rng.standard_normal((1, 2, 4, 4)))

    def single(branch):
        y = T.concat_channels(T.relu(x) if branch == 0 else x, x if branch == 0 else T.relu(x))
        return T.mse(y, tgt)

    # one graph where x feeds both branches
    y = T.concat_channels(T.relu(x), x)
    loss = T.mse(y, tgt)
    loss.backward()
    both = x.grad.copy()

    # sum of the two single-path grads, obtained by cutting fan-out with constants
    x.zero_grad()
    ya = T.concat_channels(T.relu(x), T.constant(x.data))
    T.mse(ya, tgt).backward()
    ga = x.grad.copy()
    x.zero_grad()
    yb = T.concat_channels(T.constant(np.maximum(x.data, 0.0)), x)
    T.mse(yb, tgt).backward()
    gb = x.grad.copy()
    assert np.allclose(both, ga + gb, rtol=0, atol=1e-14)


def test_ops_are_pure():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 6, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    r1 = T.conv2d(T.constant(x), T.constant(k), T.constant(b)).data
    r2 = T.conv2d(T.constant(x), T.constant(k), T.constant(b)).data
    assert np.array_equal(r1, r2)


def test_no_grad_skips_graph():
    w = T.parameter(np.ones((1, 1, 2, 2)))
    with T.no_grad():
        y = T.relu(w)
    assert y.parents == () and not y.requires_grad


def test_sinusoidal_embedding_shape_and_determinism():
    e1 = T.sinusoidal_embedding([0.1, 0.2], 64)
    e2 = T.sinusoidal_embedding([0.1, 0.2], 64)
    assert e1.shape == (2, 64, 1, 1)
    assert np.array_equal(e1.data, e2.data)
    assert not np.allclose(e1.data[0], e1.data[1])
    with pytest.raises(ValueError, match="even"):
        T.sinusoidal_embedding([0.1], 3)


# ---------------------------------------------------------------------------
# gradient checks: every primitive against central finite differences


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_grad_conv2d(padding):
    rng = np.random.default_rng(10)
    x = rand_param(rng, 2, 3, 6, 5)
    k = rand_param(rng, 4, 3, 3, 3)
    b = rand_param(rng, 4)
    tgt = T.constant(rng.standard_normal(T.conv2d(x, k, b, padding).shape))

    def build():
        for p in (x, k, b):
            p.zero_grad()
        return T.mse(T.conv2d(x, k, b, padding), tgt)

    check_grads(build, [x, k, b])


def test_grad_conv2d_1x1():
    rng = np.random.default_rng(11)
    x = rand_param(rng, 1, 4, 1, 1)
    k = rand_param(rng, 3, 4, 1, 1)
    b = rand_param(rng, 3)
    tgt = T.constant(rng.standard_normal((1, 3, 1, 1)))

    def build():
        for p in (x, k, b):
            p.zero_grad()
        return T.mse(T.conv2d(x, k, b, "same"), tgt)

    check_grads(build, [x, k, b])


@pytest.mark.parametrize(
    "op",
    [
        lambda x: T.relu(x),
        lambda x: T.leaky_relu(x, 0.1),
        lambda x: T.avg_pool2(x),
        lambda x: T.upsample_nearest2(x),
        lambda x: T.scalar_mul(x, -1.7),
    ],
)
def test_grad_unary_ops(op):
    rng = np.random.default_rng(12)
    x = rand_param(rng, 2, 2, 4, 4)
    # keep away from the relu kink where finite differences are invalid
    x.data[np.abs(x.data) < 1e-3] = 0.1
    tgt = T.constant(rng.standard_normal(op(T.constant(x.data)).shape))

    def build():
        x.zero_grad()
        return T.mse(op(x), tgt)

    check_grads(build, [x])


def test_grad_binary_ops():
    rng = np.random.default_rng(13)
    a = rand_param(rng, 2, 2, 4, 4)
    b = rand_param(rng, 2, 2, 4, 4)
    c = rand_param(rng, 2, 3, 4, 4)
    bias = rand_param(rng, 2, 2, 1, 1)
    tgt1 = T.constant(rng.standard_normal((2, 2, 4, 4)))
    tgt2 = T.constant(rng.standard_normal((2, 5, 4, 4)))

    def build_add():
        a.zero_grad(), b.zero_grad()
        return T.mse(T.add(a, b), tgt1)

    def build_bias():
        a.zero_grad(), bias.zero_grad()
        return T.mse(T.add_channel_bias(a, bias), tgt1)

    def build_concat():
        a.zero_grad(), c.zero_grad()
        return T.mse(T.concat_channels(a, c), tgt2)

    def build_mse():
        a.zero_grad(), b.zero_grad()
        return T.mse(a, b)

    check_grads(build_add, [a, b])
    check_grads(build_bias, [a, bias])
    check_grads(build_concat, [a, c])
    check_grads(build_mse, [a, b])


def test_grad_composite_chain():
    # conv -> leaky -> pool -> upsample -> concat -> conv -> mse with fan-out
    rng = np.random.default_rng(14)
    x = T.constant(rng.standard_normal((2, 2, 8, 8)))
    k1 = rand_param(rng, 4, 2, 3, 3)
    b1 = rand_param(rng, 4)
    k2 = rand_param(rng, 1, 8, 3, 3)
    b2 = rand_param(rng, 1)
    tgt = T.constant(rng.standard_normal((2, 1, 8, 8)))

    def build():
        for p in (k1, b1, k2, b2):
            p.zero_grad()
        h = T.leaky_relu(T.conv2d(x, k1, b1), 0.1)
        d = T.upsample_nearest2(T.avg_pool2(h))
        y = T.conv2d(T.concat_channels(h, d), k2, b2)
        return T.mse(y, tgt)

    check_grads(build, [k1, b1, k2, b2])
