import warnings

import numpy as np
import pytest

from recdevid import tensor as T
from recdevid.tensor import DomainError, ShapeError, Tensor

from oracles import naive_conv1d_valid, naive_matmul


def weighted_sum(y, rng):
    """Scalarise an output with fixed random weights so every entry matters."""
    w = Tensor(rng.normal(size=y.shape).astype(y.dtype))
    return T.sum(y * w)


def _unary(op, low=-2.0, high=2.0, shape=(3, 4)):
    def make(rng):
        x = Tensor(rng.uniform(low, high, size=shape))
        return (lambda p: weighted_sum(op(p), np.random.default_rng(99))), x
    return make


def _binary(op, shape_b=None, positive_b=False):
    def make(rng):
        a = Tensor(rng.normal(size=(3, 4)))
        shape = shape_b if shape_b is not None else (3, 4)
        bd = rng.uniform(0.5, 2.0, size=shape) if positive_b else rng.normal(size=shape)
        b = Tensor(bd)
        return (lambda p: weighted_sum(op(p, b), np.random.default_rng(7))), a
    return make


def _rhs(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=True):
    def make(rng):
        a = Tensor(rng.normal(size=shape_a))
        b = Tensor(rng.uniform(0.5, 2.0, size=shape_b) if positive_b else rng.normal(size=shape_b))
        return (lambda p: weighted_sum(op(a, p), np.random.default_rng(7))), b
    return make


def _max_case(rng):
    # distinct values so the argmax is stable under perturbation
    x = Tensor(rng.permutation(12).reshape(3, 4) * 0.5 + rng.uniform(0, 0.01, size=(3, 4)))
    return (lambda p: weighted_sum(T.max(p, axis=1), np.random.default_rng(3))), x


def _conv_case(stride):
    def make(rng):
        x = Tensor(rng.normal(size=(2, 9, 3)))
        w = Tensor(rng.normal(size=(3, 3, 4)))
        return (lambda p: weighted_sum(T.conv1d_valid(p, w, stride), np.random.default_rng(5))), x
    return make


def _conv_w_case(rng):
    x = Tensor(rng.normal(size=(2, 9, 3)))
    w = Tensor(rng.normal(size=(3, 3, 4)))
    return (lambda p: weighted_sum(T.conv1d_valid(x, p, 2), np.random.default_rng(5))), w


def _matmul_case(batched, side):
    def make(rng):
        a = Tensor(rng.normal(size=(2, 3, 4) if batched else (3, 4)))
        b = Tensor(rng.normal(size=(2, 4, 5) if batched else (4, 5)))
        if side == "a":
            return (lambda p: weighted_sum(T.matmul(p, b), np.random.default_rng(2))), a
        return (lambda p: weighted_sum(T.matmul(a, p), np.random.default_rng(2))), b
    return make


def _bias_case(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4,)))
    return (lambda p: weighted_sum(x + p, np.random.default_rng(4)) + weighted_sum(x * p, np.random.default_rng(6))), b


def _concat_case(rng):
    a = Tensor(rng.normal(size=(3, 2)))
    return (lambda p: weighted_sum(T.concat([p, a, p], axis=1), np.random.default_rng(8))), Tensor(rng.normal(size=(3, 2)))


def _stack_case(rng):
    a = Tensor(rng.normal(size=(3, 2)))
    return (lambda p: weighted_sum(T.stack([a, p], axis=0), np.random.default_rng(8))), Tensor(rng.normal(size=(3, 2)))


PRIMITIVES = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div_lhs": _binary(T.div, positive_b=True),
    "div_rhs": _rhs(T.div),
    "bias_broadcast": _bias_case,
    "matmul_lhs": _matmul_case(False, "a"),
    "matmul_rhs": _matmul_case(False, "b"),
    "matmul_batched_lhs": _matmul_case(True, "a"),
    "matmul_batched_rhs": _matmul_case(True, "b"),
    "conv1d_stride1": _conv_case(1),
    "conv1d_stride2": _conv_case(2),
    "conv1d_stride3": _conv_case(3),
    "conv1d_kernel": _conv_w_case,
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "relu": _unary(T.relu, 0.1, 2.0),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.5, 3.0),
    "sqrt": _unary(T.sqrt, 0.5, 3.0),
    "square": _unary(T.square),
    "neg": _unary(T.neg),
    "sum_axis": _unary(lambda x: T.sum(x, axis=0)),
    "mean_keepdims": _unary(lambda x: T.mean(x, axis=1, keepdims=True)),
    "max": _max_case,
    "concat": _concat_case,
    "stack": _stack_case,
    "slice": _unary(lambda x: x[1:, ::2]),
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "transpose": _unary(lambda x: T.transpose(x)),
    "broadcast_to": _unary(lambda x: T.broadcast_to(x, (2, 3, 4))),
    "pad": _unary(lambda x: T.pad(x, (1, 2), axis=1)),
    "flip": _unary(lambda x: T.flip(x, 0)),
    "softmax": _unary(lambda x: T.softmax(x, axis=-1)),
    "log_softmax": _unary(lambda x: T.log_softmax(x, axis=-1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_float32(name):
    for trial in range(10):
        fn, point = PRIMITIVES[name](np.random.default_rng(trial))
        assert point.dtype == np.float32
        assert T.finite_diff_check(fn, point, eps=1e-3) < 1e-3, (name, trial)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_float64(name, f64):
    for trial in range(10):
        fn, point = PRIMITIVES[name](np.random.default_rng(trial))
        assert point.dtype == np.float64
        assert T.finite_diff_check(fn, point, eps=1e-6) < 1e-6, (name, trial)


def test_activations_at_zero():
    z = Tensor(np.zeros(3))
    assert np.all(T.sigmoid(z).data == 0.5)
    assert np.all(T.tanh(z).data == 0.0)


def test_conv_output_lengths():
    assert T.conv_out_len(73, 3, 3) == 24
    assert T.conv_out_len(24, 3, 2) == 11
    x = Tensor(np.zeros((1, 73, 1)))
    w = Tensor(np.zeros((3, 1, 64)))
    assert T.conv1d_valid(x, w, 3).shape == (1, 24, 64)


def test_matmul_matches_triple_loop(rng):
    for _ in range(5):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
        with T.precision(np.float64):
            out = T.matmul(Tensor(a), Tensor(b)).data
        assert out.shape == (2, 4)
        np.testing.assert_allclose(out, naive_matmul(a, b), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_matches_loops(rng, stride):
    x, w = rng.normal(size=(2, 11, 3)), rng.normal(size=(3, 3, 5))
    with T.precision(np.float64):
        out = T.conv1d_valid(Tensor(x), Tensor(w), stride).data
    for n in range(2):
        np.testing.assert_allclose(out[n], naive_conv1d_valid(x[n], w, stride), rtol=1e-12, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        T.conv1d_valid(Tensor(np.zeros((1, 2, 1))), Tensor(np.zeros((3, 1, 1))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.zeros(6)), (4, 2))


def test_domain_errors():
    with pytest.raises(DomainError):
        T.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(DomainError):
        T.log(Tensor(np.array([-1.0])))


def test_backward_simple_cases(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    T.backward(T.sum(x))
    assert np.all(x.grad == 1.0)
    x.grad = None
    T.backward(T.sum(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)


def test_fan_out_accumulates(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    T.backward(T.sum(x + x))
    assert np.all(x.grad == 2.0)
    # same as feeding the value in twice through separate leaves
    a = Tensor(x.data.copy(), requires_grad=True)
    b = Tensor(x.data.copy(), requires_grad=True)
    T.backward(T.sum(a + b))
    assert np.all(x.grad == a.grad + b.grad)


def test_tape_is_replayed_in_reverse_order(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = T.sum(T.tanh(T.sigmoid(x) * 2.0))
    tape = T.Tape.from_output(y)
    seqs = [n.seq for n in tape]
    assert seqs == sorted(seqs)
    assert [n.op for n in tape.reverse()] == ["sum", "tanh", "mul", "sigmoid"]


def test_detached_backward_warns():
    with pytest.warns(UserWarning):
        assert T.backward(T.sum(Tensor(np.ones(3)))) is False
    with T.no_grad():
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.sum(x * 2.0)
    assert y._node is None


def test_lossless_view_ops(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    assert np.array_equal(T.reshape(T.reshape(x, (6, 4)), (2, 3, 4)).data, x.data)
    back = T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(back.data, x.data)
    pieces = [x[:, :, :2], x[:, :, 2:]]
    assert np.array_equal(T.concat(pieces, axis=2).data, x.data)


def test_linear_function_gradient_is_exact(f64, rng):
    a = Tensor(rng.normal(size=(3, 4)))
    fn = lambda p: T.sum(p * a)  # noqa: E731
    assert T.finite_diff_check(fn, Tensor(rng.normal(size=(3, 4))), eps=1e-3) < 1e-12


def test_sigmoid_sum_within_threshold(rng):
    assert T.finite_diff_check(lambda p: T.sum(T.sigmoid(p)), Tensor(rng.normal(size=10))) < 1e-3


def test_wrong_gradient_is_caught(rng):
    """A primitive whose backward is off by 2x must fail the check with ~0.5."""
    def bad_square(x):
        xd = x.data
        return T.make_op(xd * xd, (x,), lambda g: (4.0 * g * xd,), "bad_square")

    with T.precision(np.float64):
        err = T.finite_diff_check(lambda p: T.sum(bad_square(p)), Tensor(rng.uniform(1.0, 3.0, size=5)), eps=1e-6)
    assert err == pytest.approx(0.5, abs=1e-6)
    assert err > 1e-3


def test_strict_mode_rejects_nan():
    with T.strict_mode(), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(FloatingPointError):
            T.exp(Tensor(np.array([1000.0]))) * 0.0 + T.exp(Tensor(np.array([1000.0])))
    with T.strict_mode(False), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert not np.isfinite(T.exp(Tensor(np.array([1000.0]))).data).all()


def test_precision_controls_dtype():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
