import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from admix import tensor as T
from admix.errors import GraphError, LabelError, NonFiniteError, ShapeError, ZeroGradientError
from admix.tensor import Tape, Tensor

import oracles


def grad_of(build, *inputs):
    """Gradients of build(*watched) with respect to every input."""
    tape = Tape()
    watched = [tape.watch(Tensor(a)) for a in inputs]
    loss = build(*watched)
    return [g.numpy() for g in tape.gradient(loss, watched)]


# ---------------------------------------------------------------------------
# Tensor basics


def test_tensor_is_float32_and_readonly():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float32
    assert t.shape == (2, 2)
    assert t.size == 4
    with pytest.raises(ValueError):
        t.data[0, 0] = 5


def test_tensor_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_tensor_copies_input():
    a = np.ones(3, dtype=np.float32)
    t = Tensor(a)
    a[0] = 7
    assert t.data[0] == 1


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = Tensor([[[1, 2], [3, 4]]])
    k = Tensor(np.ones((1, 1, 1, 1)))
    out = T.conv2d(x, k)
    np.testing.assert_array_equal(out.data, [[[1, 2], [3, 4]]])


def test_conv2d_zero_kernel(rng):
    x = Tensor(rng.normal(size=(3, 7, 6)))
    out = T.conv2d(x, T.zeros((4, 3, 3, 3)), stride=2, padding=1)
    assert out.shape == (4, 4, 3)
    assert not out.data.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 2)])
def test_conv2d_matches_loop_oracle(rng, stride, pad):
    x = rng.uniform(-10, 10, size=(3, 5, 5)).astype(np.float32)
    k = rng.uniform(-10, 10, size=(2, 3, 3, 3)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(k), stride, pad)
    expect = oracles.conv2d_loops(x, k, stride, pad)
    assert out.shape == expect.shape
    # float32 storage of values up to ~1e3 limits agreement to ~1e-4 absolute
    np.testing.assert_allclose(out.data, expect, rtol=1e-6, atol=1e-4)


def test_conv2d_small_values_within_1e6(rng):
    x = rng.random((3, 5, 5)).astype(np.float32)
    k = rng.random((2, 3, 3, 3)).astype(np.float32) * 0.1
    out = T.conv2d(Tensor(x), Tensor(k))
    assert np.abs(out.data - oracles.conv2d_loops(x, k)).max() < 1e-6


def test_conv2d_batched_equals_per_image(rng):
    x = rng.random((4, 3, 6, 6)).astype(np.float32)
    k = Tensor(rng.normal(size=(2, 3, 3, 3)))
    b = Tensor(rng.normal(size=2))
    batch = T.conv2d(Tensor(x), k, 1, 1, bias=b).data
    for i in range(4):
        np.testing.assert_array_equal(batch[i], T.conv2d(Tensor(x[i]), k, 1, 1, bias=b).data)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError) as e:
        T.conv2d(T.zeros((3, 4, 4)), T.zeros((2, 2, 3, 3)))
    assert e.value.op == "conv2d"
    with pytest.raises(ShapeError):
        T.conv2d(T.zeros((1, 2, 2)), T.zeros((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(T.zeros((1, 4, 4)), T.zeros((1, 1, 3, 3)), stride=0)


# ---------------------------------------------------------------------------
# dense, relu, pooling


def test_dense_identity_and_bias(rng):
    x = rng.normal(size=4).astype(np.float32)
    out = T.dense(Tensor(x), Tensor(np.eye(4)), T.zeros((4,)))
    np.testing.assert_array_equal(out.data, x)
    b = Tensor([1.5, -2.0, 3.0])
    out = T.dense(Tensor(x), T.zeros((3, 4)), b)
    np.testing.assert_array_equal(out.data, b.data)


def test_dense_matches_loop_oracle(rng):
    w = rng.uniform(-1, 1, size=(4, 3)).astype(np.float32)
    b = rng.uniform(-1, 1, size=4).astype(np.float32)
    x = rng.uniform(-1, 1, size=3).astype(np.float32)
    out = T.dense(Tensor(x), Tensor(w), Tensor(b))
    assert np.abs(out.data - oracles.dense_loops(x, w, b)).max() < 1e-6


def test_dense_mismatch():
    with pytest.raises(ShapeError):
        T.dense(T.zeros((3,)), T.zeros((2, 4)), T.zeros((2,)))
    with pytest.raises(ShapeError):
        T.dense(T.zeros((4,)), T.zeros((2, 4)), T.zeros((3,)))


def test_relu():
    np.testing.assert_array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_avgpool():
    c = T.avgpool2d(Tensor(np.full((2, 4, 6), 0.3)), 2)
    np.testing.assert_array_equal(c.data, np.full((2, 2, 3), np.float32(0.3)))
    np.testing.assert_array_equal(T.avgpool2d(Tensor([[[1, 2], [3, 4]]]), 2).data, [[[2.5]]])
    with pytest.raises(ShapeError):
        T.avgpool2d(T.zeros((1, 5, 4)), 2)


# ---------------------------------------------------------------------------
# cross-entropy


def test_xent_uniform():
    for label in range(10):
        loss = T.softmax_cross_entropy(T.zeros((10,)), label).item()
        assert abs(loss - math.log(10)) < 1e-6


def test_xent_saturated():
    assert T.softmax_cross_entropy(Tensor([1000, 0, 0]), 0).item() < 1e-6


def test_xent_matches_mpmath():
    mpmath.mp.dps = 50
    z = [mpmath.mpf(1), mpmath.mpf(2), mpmath.mpf(3)]
    expect = -mpmath.log(mpmath.exp(z[2]) / sum(mpmath.exp(v) for v in z))
    got = T.softmax_cross_entropy(Tensor([1, 2, 3]), 2).item()
    assert abs(got - float(expect)) < 1e-7


def test_xent_label_errors():
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(T.zeros((3,)), 3)
    with pytest.raises(LabelError):
        T.softmax_cross_entropy(T.zeros((3,)), -1)


def test_xent_soft_target_is_weighted_sum(rng):
    z = Tensor(rng.normal(size=5))
    soft = T.softmax_cross_entropy(z, np.array([0.0, 0.7, 0.0, 0.3, 0.0])).item()
    hard = 0.7 * T.softmax_cross_entropy(z, 1).item() + 0.3 * T.softmax_cross_entropy(z, 3).item()
    assert abs(soft - hard) < 1e-6


def test_xent_batched_is_mean(rng):
    z = rng.normal(size=(4, 6)).astype(np.float32)
    y = np.array([0, 5, 2, 2])
    batch = T.softmax_cross_entropy(Tensor(z), y).item()
    each = [T.softmax_cross_entropy(Tensor(z[i]), int(y[i])).item() for i in range(4)]
    assert abs(batch - np.mean(each)) < 1e-6


# ---------------------------------------------------------------------------
# gradients


def test_gradient_of_sum_is_ones(rng):
    (g,) = grad_of(T.total, rng.normal(size=(2, 3)))
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_linear_softmax_closed_form(rng):
    w = rng.normal(size=(2, 4)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    x = rng.normal(size=4).astype(np.float32)
    (g,) = grad_of(lambda v: T.softmax_cross_entropy(T.dense(v, Tensor(w), Tensor(b)), 1), x)
    z = w.astype(np.float64) @ x + b
    p = np.exp(z - z.max())
    p /= p.sum()
    expect = (p - np.array([0.0, 1.0])) @ w
    assert np.abs(g - expect).max() < 1e-6


def test_input_gradient_requires_scalar_loss(rng):
    tape = Tape()
    x = tape.watch(Tensor(rng.normal(size=3)))
    with pytest.raises(GraphError):
        T.input_gradient(tape, T.relu(x), x)


def test_input_gradient_zero_when_unused(rng):
    tape = Tape()
    x = tape.watch(Tensor(rng.normal(size=3)))
    y = tape.watch(Tensor(rng.normal(size=3)))
    loss = T.total(y)
    np.testing.assert_array_equal(T.input_gradient(tape, loss, x).data, 0)


def test_gradient_deterministic(tiny_net, tiny_image):
    def once():
        tape = Tape()
        x = tape.watch(Tensor(tiny_image))
        return T.input_gradient(tape, T.softmax_cross_entropy(tiny_net.logits(x), 1), x).data
    np.testing.assert_array_equal(once(), once())


def _linear_readout(out_shape, rng):
    r = rng.normal(size=int(np.prod(out_shape)))
    return r, lambda out: T.total(T.dense(T.flatten(out), Tensor(r[None, :]), T.zeros((1,))))


XCORR_K = np.random.default_rng(5).uniform(-1, 1, size=(3, 5)).astype(np.float32)

OPS = {
    # name: (input shapes, tensor op, float64 reference)
    "add": ([(2, 3), (2, 3)], lambda a, b: T.add(a, b), lambda a, b: a + b),
    "scale": ([(2, 3)], lambda a: T.scale(a, 0.7), lambda a: 0.7 * a),
    "relu": ([(3, 4)], T.relu, lambda a: np.maximum(a, 0)),
    "reshape": ([(2, 6)], lambda a: T.reshape(a, (3, 4)), lambda a: a.reshape(3, 4)),
    "stack": ([(2, 2), (2, 2)], lambda a, b: T.stack([a, b, a]), lambda a, b: np.stack([a, b, a])),
    "conv2d": ([(2, 5, 5), (3, 2, 3, 3)], lambda x, k: T.conv2d(x, k, 2, 1),
               lambda x, k: oracles.conv2d_loops(x, k, 2, 1)),
    "dense": ([(4,), (3, 4), (3,)], T.dense, lambda x, w, b: w @ x + b),
    "avgpool2d": ([(2, 4, 4)], lambda a: T.avgpool2d(a, 2),
                  lambda a: a.reshape(2, 2, 2, 2, 2).mean(axis=(2, 4))),
    "resize_up": ([(2, 3, 2)], lambda a: T.resize_nearest(a, 5, 4),
                  lambda a: a[:, (np.arange(5) * 3) // 5][:, :, (np.arange(4) * 2) // 4]),
    "resize_down": ([(1, 6, 5)], lambda a: T.resize_nearest(a, 4, 3),
                    lambda a: a[:, (np.arange(4) * 6) // 4][:, :, (np.arange(3) * 5) // 3]),
    "pad_constant": ([(2, 3, 3)], lambda a: T.pad_constant(a, 1, 0, 2, 1, 0.5),
                     lambda a: np.pad(a, ((0, 0), (1, 0), (2, 1)), constant_values=0.5)),
    # the smoothing kernel is a constant; only the filtered input is differentiated
    "cross_correlate_2d": ([(2, 5, 6)], lambda g: T.cross_correlate_2d(g, Tensor(XCORR_K)),
                           lambda g: oracles.xcorr_same_loops(g, XCORR_K)),
    "where": ([(3, 3), (3, 3)], lambda a, b: T.where(np.eye(3, dtype=bool), a, b),
              lambda a, b: np.where(np.eye(3, dtype=bool), a, b)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name, rng):
    shapes, op, ref = OPS[name]
    inputs = [rng.uniform(-1, 1, size=s).astype(np.float32) for s in shapes]
    if name == "relu":
        # keep coordinates away from the kink so +-h never crosses it
        inputs[0] = np.where(np.abs(inputs[0]) < 0.05, 0.3, inputs[0]).astype(np.float32)
    out_shape = np.shape(ref(*[a.astype(np.float64) for a in inputs]))
    r, readout = _linear_readout(out_shape, rng)
    grads = grad_of(lambda *v: readout(op(*v)), *inputs)
    for which, (a, g) in enumerate(zip(inputs, grads)):
        def f(v, which=which):
            args = [b.astype(np.float64) for b in inputs]
            args[which] = v
            return float(np.dot(r, np.ravel(ref(*args))))
        for idx in np.ndindex(a.shape):
            num = oracles.central_difference(f, a, idx)
            assert abs(g[idx] - num) <= 1e-3 * max(abs(num), abs(g[idx]), 1e-3), (name, which, idx)


def test_xent_gradient_matches_finite_differences(rng):
    z = rng.normal(size=(3, 4)).astype(np.float32)
    q = rng.random((3, 4))
    q /= q.sum(axis=1, keepdims=True)
    for target in ([1, 3, 0], q):
        (g,) = grad_of(lambda v: T.softmax_cross_entropy(v, target), z)
        qq = np.zeros((3, 4))
        if isinstance(target, list):
            qq[np.arange(3), target] = 1
        else:
            qq = q

        def f(v):
            m = v.max(axis=1, keepdims=True)
            logp = v - m - np.log(np.exp(v - m).sum(axis=1, keepdims=True))
            return float(-(qq * logp).sum() / 3)
        for idx in np.ndindex(z.shape):
            num = oracles.central_difference(f, z, idx)
            assert abs(g[idx] - num) <= 1e-3 * max(abs(num), 1e-3)


def test_gradient_accumulates_over_reuse(rng):
    x = rng.normal(size=4).astype(np.float32)
    (g,) = grad_of(lambda v: T.total(T.add(v, T.scale(v, 3.0))), x)
    np.testing.assert_array_equal(g, np.full(4, 4.0))


# ---------------------------------------------------------------------------
# resize, pad, cross-correlation


def test_resize_nearest_replicates_blocks():
    x = Tensor([[[1, 2], [3, 4]]])
    out = T.resize_nearest(x, 4, 4).data[0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_resize_same_size_identity(rng):
    x = Tensor(rng.random((3, 5, 7)))
    np.testing.assert_array_equal(T.resize_nearest(x, 5, 7).data, x.data)


def test_resize_rejects_empty_target():
    with pytest.raises(ShapeError):
        T.resize_nearest(T.zeros((1, 2, 2)), 0, 3)


def test_pad_constant_ring():
    out = T.pad_constant(Tensor([[1, 2], [3, 4]]), 1, 1, 1, 1, 0).data
    assert out.shape == (4, 4)
    np.testing.assert_array_equal(out[1:3, 1:3], [[1, 2], [3, 4]])
    assert out.sum() == 10
    with pytest.raises(ShapeError):
        T.pad_constant(T.zeros((2, 2)), -1, 0, 0, 0)


def test_cross_correlate_identity_kernel(rng):
    g = Tensor(rng.normal(size=(3, 6, 5)))
    np.testing.assert_array_equal(T.cross_correlate_2d(g, Tensor([[1.0]])).data, g.data)


def test_cross_correlate_box_on_constant():
    out = T.cross_correlate_2d(Tensor(np.full((2, 6, 6), 0.4)), Tensor(np.full((3, 3), 1 / 9))).data
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], 0.4, atol=1e-7)


def test_cross_correlate_matches_loop_oracle(rng):
    g = rng.uniform(-10, 10, size=(3, 9, 8)).astype(np.float32)
    k = rng.uniform(0, 1, size=(7, 7)).astype(np.float32)
    k /= k.sum()
    out = T.cross_correlate_2d(Tensor(g), Tensor(k)).data
    assert np.abs(out - oracles.xcorr_same_loops(g, k)).max() < 1e-6


def test_cross_correlate_even_kernel():
    with pytest.raises(ShapeError):
        T.cross_correlate_2d(T.zeros((1, 4, 4)), T.zeros((2, 3)))


# ---------------------------------------------------------------------------
# attack helpers


def test_l1_normalize_example():
    np.testing.assert_array_equal(T.l1_normalize(Tensor([3, -1])).data, [0.75, -0.25])


def test_l1_normalize_zero():
    with pytest.raises(ZeroGradientError, match="zero gradient"):
        T.l1_normalize(T.zeros((3, 2)))


def test_sign_and_clip_examples():
    np.testing.assert_array_equal(T.sign(Tensor([0.5, -0.3, 0])).data, [1, -1, 0])
    np.testing.assert_array_equal(T.clip(Tensor([-0.1, 0.5, 1.2]), 0, 1).data, [0, 0.5, 1])


finite = arrays(np.float32, st.integers(1, 30),
                elements=st.floats(-1e3, 1e3, allow_nan=False, width=32))


@given(finite)
def test_sign_idempotent(a):
    s = T.sign(Tensor(a))
    np.testing.assert_array_equal(T.sign(s).data, s.data)


@given(finite, st.floats(-5, 0, width=32), st.floats(0, 5, width=32))
def test_clip_idempotent(a, lo, hi):
    once = T.clip(Tensor(a), lo, hi)
    np.testing.assert_array_equal(T.clip(once, lo, hi).data, once.data)
    assert (once.data >= lo).all() and (once.data <= hi).all()


@settings(max_examples=200)
@given(finite)
def test_l1_normalize_unit_norm(a):
    if not np.any(a):
        return
    n = T.l1_normalize(Tensor(a)).data
    assert abs(np.abs(n.astype(np.float64)).sum() - 1) < 1e-6


def test_ops_deterministic(rng):
    x = Tensor(rng.normal(size=(2, 3, 8, 8)))
    k = Tensor(rng.normal(size=(4, 3, 3, 3)))
    a = T.conv2d(x, k, 1, 1).data
    b = T.conv2d(x, k, 1, 1).data
    assert a.tobytes() == b.tobytes()
