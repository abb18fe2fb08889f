import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cellnca import autodiff as ad
from cellnca.errors import ShapeError, TapeError

from oracles import central_differences, channel_max_scan, conv3x3_loops, linear_loops


def const(value):
    return ad.Tape(enabled=False).constant(np.asarray(value))


def pair(x, k):
    tape = ad.Tape(enabled=False)
    return tape.constant(x), tape.constant(k)


# --- depthwise_conv3x3 -------------------------------------------------------

def test_conv_zero_input(rng):
    x, k = pair(np.zeros((4, 4, 2)), rng.normal(size=(2, 3, 3)))
    assert np.all(ad.depthwise_conv3x3(x, k).value == 0)


def test_conv_identity_kernel(rng):
    k = np.zeros((3, 3, 3))
    k[:, 1, 1] = 1
    x = rng.normal(size=(5, 6, 3))
    out = ad.depthwise_conv3x3(*pair(x, k)).value
    assert np.array_equal(out, x)


def test_conv_matches_loop_oracle_exactly(rng):
    x = rng.normal(size=(5, 5, 3))
    k = rng.normal(size=(3, 3, 3))
    expected = conv3x3_loops(x, k)
    assert np.array_equal(ad.depthwise_conv3x3(*pair(x, k)).value, expected)


def test_conv_no_cross_channel_mixing(rng):
    x = np.zeros((5, 5, 3))
    x[..., 1] = rng.normal(size=(5, 5))
    out = ad.depthwise_conv3x3(*pair(x, rng.normal(size=(3, 3, 3)))).value
    assert np.all(out[..., 0] == 0) and np.all(out[..., 2] == 0)


def test_conv_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.depthwise_conv3x3(*pair(np.zeros((4, 4, 2)), np.zeros((3, 3, 3))))


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (5, 4, 2), elements=st.floats(-10, 10)),
    arrays(np.float64, (5, 4, 2), elements=st.floats(-10, 10)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_conv_linearity(x, y, a, b):
    k = np.random.default_rng(0).normal(size=(2, 3, 3))
    lhs = ad.depthwise_conv3x3(*pair(a * x + b * y, k)).value
    rhs = a * ad.depthwise_conv3x3(*pair(x, k)).value + b * ad.depthwise_conv3x3(*pair(y, k)).value
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)


# --- linear / relu -----------------------------------------------------------

def test_linear_identity_and_zero_input(rng):
    tape = ad.Tape(enabled=False)
    x = rng.normal(size=4)
    out = ad.linear(tape.constant(x), tape.constant(np.eye(4)), tape.constant(np.zeros(4))).value
    assert np.array_equal(out, x)
    b = rng.normal(size=3)
    out = ad.linear(tape.constant(np.zeros(5)), tape.constant(rng.normal(size=(3, 5))), tape.constant(b)).value
    assert np.array_equal(out, b)


def test_linear_matches_loops(rng):
    x, W, b = rng.normal(size=3), rng.normal(size=(4, 3)), rng.normal(size=4)
    tape = ad.Tape(enabled=False)
    out = ad.linear(tape.constant(x), tape.constant(W), tape.constant(b)).value
    np.testing.assert_allclose(out, linear_loops(x, W, b), rtol=1e-12)


def test_linear_dimension_mismatch():
    tape = ad.Tape(enabled=False)
    with pytest.raises(ShapeError):
        ad.linear(tape.constant(np.zeros(3)), tape.constant(np.zeros((2, 4))), tape.constant(np.zeros(2)))


def test_relu_values():
    assert np.array_equal(ad.relu(const([-1.0, 0.0, 2.0])).value, [0, 0, 2])
    assert np.all(ad.relu(const(-np.arange(1.0, 6.0))).value == 0)


@pytest.mark.parametrize("x0, expected", [(2.0, 1.0), (-2.0, 0.0)])
def test_relu_gradient_vs_finite_differences(x0, expected):
    h = 1e-4
    fd = (max(x0 + h, 0) - max(x0 - h, 0)) / (2 * h)
    tape = ad.Tape()
    x = tape.leaf(np.array(x0), name="x")
    grads = tape.backward(ad.total(ad.relu(x)))
    assert grads["x"] == pytest.approx(fd) == expected


# --- channel_max -------------------------------------------------------------

def test_channel_max_constant_ties_first_cell():
    grid = np.full((4, 5, 2), 0.7)
    v, pos = ad.channel_max(const(grid))
    assert np.all(v.value == 0.7)
    assert pos.tolist() == [[0, 0], [0, 0]]


def test_channel_max_single_peak():
    grid = np.zeros((6, 6, 1))
    grid[2, 3, 0] = 5.0
    v, pos = ad.channel_max(const(grid))
    assert v.value[0] == 5.0 and tuple(pos[0]) == (2, 3)


def test_channel_max_matches_scan(rng):
    grid = rng.normal(size=(8, 8, 4))
    v, pos = ad.channel_max(const(grid))
    ev, epos = channel_max_scan(grid)
    assert np.array_equal(v.value, ev) and np.array_equal(pos, epos)


def test_channel_max_gradient_is_one_hot(rng):
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=(5, 5, 3)), name="x")
    v, pos = ad.channel_max(x)
    w = tape.constant(rng.normal(size=3) + 5)
    grads = tape.backward(ad.total(ad.mul(v, w)))
    g = grads["x"]
    for c in range(3):
        nz = np.argwhere(g[..., c] != 0)
        assert nz.tolist() == [pos[c].tolist()]


# --- tape mechanics ----------------------------------------------------------

def test_square_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.array(3.0), name="x")
    assert tape.backward(ad.mul(x, x))["x"] == 6.0


def test_backward_before_forward():
    tape = ad.Tape()
    x = tape.leaf(np.array(1.0), name="x")
    with pytest.raises(TapeError):
        tape.backward(x)


def test_backward_needs_scalar(rng):
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=3), name="x")
    with pytest.raises(TapeError):
        tape.backward(ad.relu(x))


def test_topological_order_and_retained_slots(rng):
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=(4, 4, 2)), name="x")
    k = tape.leaf(rng.normal(size=(2, 3, 3)), name="k")
    y = ad.relu(ad.depthwise_conv3x3(x, k))
    v, _ = ad.channel_max(y)
    loss = ad.total(v)
    for node in tape.nodes:
        assert all(t.index < node.out.index for t in node.inputs)
    tape.backward(loss, retain_grads=True)
    assert all(node.out.grad is not None for node in tape.nodes)


def _op_check(build, inputs, h=1e-6, rtol=1e-6):
    """Analytic gradient of sum(w * op(inputs)) vs central differences, float64."""
    w = np.random.default_rng(7).normal(size=build({k: v.copy() for k, v in inputs.items()}, None).shape)

    def value():
        return float((w * build(inputs, None)).sum())

    tape = ad.Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in inputs.items()}
    out = build(None, leaves)
    grads = tape.backward(ad.total(ad.mul(out, tape.constant(w))))
    fd = central_differences(value, inputs, h)
    for name in inputs:
        np.testing.assert_allclose(grads[name], fd[name], rtol=rtol, atol=1e-8, err_msg=name)


def _run(fn):
    def build(arrays, leaves):
        if leaves is None:
            tape = ad.Tape(enabled=False)
            leaves = {k: tape.constant(v) for k, v in arrays.items()}
            return fn(leaves).value
        return fn(leaves)
    return build


@pytest.mark.parametrize("name", ["conv", "linear", "relu", "concat", "masked_add", "channel_max",
                                  "perceive_linear", "softmax_ce", "sigmoid_ce"])
def test_every_op_gradient_matches_finite_differences(name, rng):
    mask = rng.random((4, 5)) < 0.5
    cases = {
        "conv": (lambda L: ad.depthwise_conv3x3(L["x"], L["k"]),
                 {"x": rng.normal(size=(4, 5, 2)), "k": rng.normal(size=(2, 3, 3))}),
        "linear": (lambda L: ad.linear(L["x"], L["W"], L["b"]),
                   {"x": rng.normal(size=(3, 4)), "W": rng.normal(size=(2, 4)), "b": rng.normal(size=2)}),
        "relu": (lambda L: ad.relu(L["x"]), {"x": rng.normal(size=(6,)) + 0.05}),
        "concat": (lambda L: ad.concat([L["a"], L["b"]]),
                   {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 4))}),
        "masked_add": (lambda L: ad.masked_add(L["x"], L["u"], mask),
                       {"x": rng.normal(size=(4, 5, 2)), "u": rng.normal(size=(4, 5, 2))}),
        "channel_max": (lambda L: ad.channel_max(L["x"])[0], {"x": rng.normal(size=(4, 5, 3))}),
        "perceive_linear": (lambda L: ad.perceive_linear(L["x"], L["k1"], L["k2"], L["W"], L["b"]),
                            {"x": rng.normal(size=(4, 5, 2)), "k1": rng.normal(size=(2, 3, 3)),
                             "k2": rng.normal(size=(2, 3, 3)), "W": rng.normal(size=(3, 6)),
                             "b": rng.normal(size=3)}),
        "softmax_ce": (lambda L: ad.softmax_cross_entropy(L["z"], 2), {"z": rng.normal(size=5)}),
        "sigmoid_ce": (lambda L: ad.sigmoid_cross_entropy(L["z"], 1), {"z": rng.normal(size=5)}),
    }
    fn, inputs = cases[name]
    _op_check(_run(fn), inputs)


def test_perceive_linear_equals_composition(rng):
    x = rng.normal(size=(2, 5, 6, 3))
    k1, k2 = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3))
    W, b = rng.normal(size=(4, 9)), rng.normal(size=4)
    tape = ad.Tape(enabled=False)
    X, K1, K2, WW, B = (tape.constant(v) for v in (x, k1, k2, W, b))
    fused = ad.perceive_linear(X, K1, K2, WW, B).value
    composed = ad.linear(ad.concat([X, ad.depthwise_conv3x3(X, K1), ad.depthwise_conv3x3(X, K2)]), WW, B).value
    np.testing.assert_allclose(fused, composed, rtol=1e-12, atol=1e-12)


def test_masked_add_keeps_unmasked_cells_bitwise(rng):
    x = rng.normal(size=(4, 4, 3)).astype(np.float32)
    x[0, 0, 0] = -0.0
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = True
    tape = ad.Tape(enabled=False)
    out = ad.masked_add(tape.constant(x), tape.constant(np.zeros_like(x)), mask).value
    keep = ~mask
    assert out[keep].tobytes() == x[keep].tobytes()
