import itertools

import numpy as np
import pytest
from scipy.special import softmax as scipy_softmax

from core import numerics as nx
from core.errors import DimensionError, NumericError, UsageError
from core.numerics import NDArray, Tape, backward, gradient_check

TRIALS = 100
TOL = 1e-4

_c = np.random.default_rng(7)
B23 = _c.normal(size=(2, 3))
B3 = _c.normal(size=(3,))
M34 = _c.normal(size=(3, 4))
POS = _c.uniform(0.5, 2.0, size=(2, 3))

PRIMITIVES = [
    ('add', (2, 3), lambda x: nx.add(x, B3)),
    ('add_broadcast', (3,), lambda x: nx.add(B23, x)),
    ('subtract', (2, 3), lambda x: nx.subtract(B23, x)),
    ('multiply', (2, 3), lambda x: nx.multiply(x, x)),
    ('divide_numerator', (2, 3), lambda x: nx.divide(x, POS)),
    ('divide_denominator', (2, 3), lambda x: nx.divide(B23, nx.add(nx.multiply(x, x), 1.0))),
    ('scale', (2, 3), lambda x: nx.scale(x, -2.5)),
    ('sin', (2, 3), nx.sin),
    ('relu', (2, 3), nx.relu),
    ('transpose_axes', (2, 3, 4), lambda x: nx.transpose(x, (2, 0, 1))),
    ('transpose_last', (2, 3), nx.transpose),
    ('reshape', (2, 3), lambda x: nx.reshape(x, (3, 2))),
    ('concatenate', (2, 3), lambda x: nx.concatenate([x, nx.scale(x, 2.0), B23], axis=0)),
    ('reduce_sum', (2, 3), lambda x: nx.reduce_sum(x, axis=1)),
    ('mean', (2, 3), lambda x: nx.mean(x, axis=0)),
    ('reduce_max', (2, 3), lambda x: nx.reduce_max(x, axis=1)),
    ('matmul', (2, 3), lambda x: nx.matmul(x, M34)),
    ('matmul_batched', (2, 3, 3), lambda x: nx.matmul(x, nx.transpose(x))),
    ('affine_input', (2, 3), lambda x: nx.affine(x, M34, np.arange(4.0))),
    ('affine_weight', (3, 4), lambda x: nx.affine(B23, x, np.ones(4))),
    ('softmax', (2, 3), lambda x: nx.softmax(x, axis=-1)),
    ('softmax_axis0', (2, 3), lambda x: nx.softmax(x, axis=0)),
    ('layer_norm_input', (2, 3), lambda x: nx.layer_norm(x, np.array([1.0, 2.0, 0.5]), B3)),
    ('layer_norm_gain', (3,), lambda x: nx.layer_norm(B23, x, B3)),
    ('dropout', (2, 3), lambda x: nx.dropout(x, 0.3, nx.generator(5), True)),
]


@pytest.mark.parametrize('name, shape, op', PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_matches_finite_differences(name, shape, op):
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(TRIALS):
        point = rng.normal(size=shape)
        w = rng.normal(size=op(NDArray(point)).shape)
        err = gradient_check(lambda x: nx.reduce_sum(nx.multiply(op(x), w)), point)
        assert err < TOL


##################### MATMUL #########################

def test_matmul_identity():
    b = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nx.matmul(np.eye(3), b).value, b)


def test_matmul_one_by_one():
    assert nx.matmul([[2.0]], [[3.0]]).value.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(nx.matmul(a, b).value - ref).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        nx.matmul(np.ones(3), np.ones((3, 1)))


##################### SOFTMAX #########################

def test_softmax_uniform():
    assert np.allclose(nx.softmax([0.0, 0.0, 0.0]).value, 1 / 3, atol=1e-15)


def test_softmax_large_entries_do_not_overflow():
    out = nx.softmax([1000.0, 0.0]).value
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_extended_precision():
    x = np.array([1.0, 2.0, 3.0], dtype=np.longdouble)
    ref = np.exp(x) / np.exp(x).sum()
    assert np.abs(nx.softmax([1.0, 2.0, 3.0]).value - ref.astype(float)).max() < 1e-15


def test_softmax_slices_sum_to_one():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=1e3, size=(5, 7, 9))
    for axis in (0, 1, 2):
        s = nx.softmax(x, axis=axis).value
        assert (s >= 0).all()
        assert np.abs(s.sum(axis=axis) - 1).max() < 1e-12
        assert np.allclose(s, scipy_softmax(x, axis=axis), atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        nx.softmax([0.0, np.nan])


##################### LAYER NORM #########################

def test_layer_norm_constant_slice():
    out = nx.layer_norm([5.0, 5.0, 5.0], np.ones(3), np.zeros(3), eps=1e-5).value
    assert out.tolist() == [0.0, 0.0, 0.0]


def test_layer_norm_unit_moments():
    out = nx.layer_norm([1.0, 2.0, 3.0], np.ones(3), np.zeros(3), eps=1e-12).value
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1) < 1e-6


def test_layer_norm_matches_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * gain + bias
    assert np.abs(nx.layer_norm(x, gain, bias).value - ref).max() < 1e-12


def test_layer_norm_rejects_bad_eps_and_width():
    with pytest.raises(UsageError):
        nx.layer_norm([1.0, 2.0], np.ones(2), np.zeros(2), eps=0)
    with pytest.raises(DimensionError):
        nx.layer_norm([1.0, 2.0], np.ones(3), np.zeros(3))


##################### TAPE AND BACKWARD #########################

def test_backward_of_sum_is_ones():
    w = NDArray([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.reduce_sum(w)
    assert backward(tape, loss)[w].tolist() == [1.0, 1.0, 1.0]


def test_backward_of_sum_of_squares():
    w = NDArray([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = nx.reduce_sum(w * w)
    assert backward(tape, loss)[w].tolist() == [2.0, -4.0]


def test_backward_accumulates_reused_inputs():
    w = NDArray([3.0], requires_grad=True)
    with Tape() as tape:
        a = nx.scale(w, 2.0)
        loss = nx.reduce_sum(a * w + a + w)
    # d/dw (2w^2 + 3w) = 4w + 3
    assert backward(tape, loss)[w].tolist() == [15.0]


def test_backward_rejects_non_scalar_loss():
    w = NDArray([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(UsageError):
        backward(tape, y)


def test_unused_parameter_gets_zero_gradient():
    w = NDArray([1.0, 2.0], requires_grad=True)
    unused = NDArray(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = nx.reduce_sum(w)
    grads = backward(tape, loss, wrt=[w, unused])
    assert np.array_equal(grads[unused], np.zeros((2, 2)))


def test_nothing_recorded_without_tape():
    w = NDArray([1.0], requires_grad=True)
    y = w * 2.0
    assert not y.requires_grad


def test_innermost_tape_records():
    w = NDArray([1.0], requires_grad=True)
    with Tape() as outer:
        with Tape() as inner:
            w * 2.0
        assert len(inner) == 1
        assert len(outer) == 0
    assert nx.active_tape() is None


def test_constants_are_not_recorded():
    with Tape() as tape:
        nx.add(np.ones(2), np.ones(2))
    assert len(tape) == 0


def test_arrays_are_immutable():
    x = NDArray([1.0, 2.0])
    with pytest.raises(ValueError):
        x.value[0] = 5.0


def test_gradients_are_deterministic():
    def grads():
        w = NDArray(nx.generator(3).normal(size=(4, 4)), requires_grad=True)
        with Tape() as tape:
            y = nx.dropout(nx.softmax(nx.matmul(w, w)), 0.5, nx.generator(4), True)
            loss = nx.reduce_sum(nx.sin(y))
        return y.value, backward(tape, loss)[w]
    (y1, g1), (y2, g2) = grads(), grads()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


##################### BROADCASTING #########################

def _shapes_up_to_rank3():
    for rank in range(4):
        yield from itertools.product((1, 2), repeat=rank)


def _tile(a, shape):
    a = a.reshape((1,) * (len(shape) - a.ndim) + a.shape)
    return np.tile(a, [s // e for s, e in zip(shape, a.shape)])


def test_broadcasting_matches_explicit_tiling():
    rng = np.random.default_rng(4)
    for sa, sb in itertools.product(list(_shapes_up_to_rank3()), repeat=2):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        out_shape = np.broadcast_shapes(sa, sb)
        ta, tb = _tile(a, out_shape), _tile(b, out_shape)
        assert np.array_equal(nx.add(a, b).value, ta + tb)
        assert np.array_equal(nx.multiply(a, b).value, ta * tb)
        assert np.array_equal(nx.subtract(a, b).value, ta - tb)

        wa = NDArray(a, requires_grad=True)
        with Tape() as tape:
            loss = nx.reduce_sum(nx.multiply(nx.add(wa, b), tb))
        g = backward(tape, loss, wrt=[wa])[wa]
        lead = len(out_shape) - len(sa)
        expected = tb.sum(axis=tuple(range(lead))) if lead else tb
        expected = expected.sum(axis=tuple(i for i, e in enumerate(sa) if e == 1), keepdims=True)
        assert g.shape == sa
        assert np.allclose(g, expected.reshape(sa), atol=1e-12)


def test_incompatible_shapes_raise():
    with pytest.raises(DimensionError):
        nx.add(np.ones(2), np.ones(3))


##################### DROPOUT #########################

def test_dropout_passes_through_outside_training():
    x = NDArray(np.ones(10))
    assert nx.dropout(x, 0.5, None, training=False) is x
    assert nx.dropout(x, 0.0, None, training=True) is x


def test_dropout_inverted_scaling():
    out = nx.dropout(np.ones(10000), 0.25, nx.generator(0), True).value
    kept = out[out != 0]
    assert np.allclose(kept, 1 / 0.75)
    assert abs(kept.size / out.size - 0.75) < 0.02


def test_dropout_needs_generator_in_training():
    with pytest.raises(UsageError):
        nx.dropout(np.ones(3), 0.5, None, True)


##################### GRADIENT CHECK #########################

def test_gradient_check_identity_is_exact():
    assert gradient_check(lambda x: x, 0.0, h=2.0 ** -17) == 0.0


def test_gradient_check_sin():
    rng = np.random.default_rng(5)
    for x in rng.uniform(-3, 3, 20):
        assert gradient_check(lambda v: nx.sin(v), x) < 1e-6


def test_gradient_check_step_range():
    with pytest.raises(UsageError):
        gradient_check(nx.sin, 0.0, h=1e-3)
    with pytest.raises(UsageError):
        gradient_check(nx.sin, 0.0, h=1e-7)


def test_gradient_check_non_finite():
    with pytest.raises(NumericError):
        gradient_check(lambda x: nx.divide(1.0, x), 0.0)
