import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acsa import autodiff as ad
from acsa.autodiff import Node, ParamGroup, ShapeError, backward, clip_gradient_norm, finite_diff_check


def test_tanh_at_zero():
    assert ad.tanh(Node(0.0)).value == 0.0


def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(ad.softmax(Node([0.0, 0.0])).value, [0.5, 0.5])


def test_matmul_identity():
    v = np.array([[1.5], [-2.0], [0.25]])
    np.testing.assert_array_equal(ad.matmul(np.eye(3), v).value, v)


def test_inputs_not_modified():
    a = ad.parameter([1.0, 2.0])
    before = a.value.copy()
    ad.mul(a, a)
    np.testing.assert_array_equal(a.value, before)


@pytest.mark.parametrize(
    "tag,shapes",
    [("add", [(2, 3), (4,)]), ("mul", [(3,), (2,)]), ("matmul", [(2, 3), (2, 3)]), ("concat", [(2, 3), (3, 2)])],
)
def test_shape_mismatch_names_op_and_shapes(tag, shapes):
    inputs = [np.ones(s) for s in shapes]
    attrs = {"axis": 0} if tag == "concat" else {}
    with pytest.raises(ShapeError) as err:
        ad.apply_primitive(tag, inputs, **attrs)
    msg = str(err.value)
    assert tag in msg and str(shapes[0]) in msg and str(shapes[1]) in msg


def test_unknown_primitive():
    with pytest.raises(KeyError):
        ad.apply_primitive("conv2d", [np.ones(2)])


def test_backward_square():
    x = ad.parameter(3.0)
    backward(ad.mul(x, x))
    assert x.grad == 6.0


def test_backward_sigmoid_at_zero():
    x = ad.parameter(0.0)
    backward(ad.sigmoid(x))
    assert x.grad == 0.25


def test_backward_rejects_non_scalar():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(ad.mul(x, x))


def test_additivity_of_repeated_use():
    x1, x2 = ad.parameter([0.3, -1.2]), ad.parameter([0.3, -1.2])
    w = np.array([2.0, -5.0])
    backward(ad.sum(ad.mul(ad.add(x1, x1), w)))
    backward(ad.sum(ad.mul(ad.scale(x2, 2.0), w)))
    np.testing.assert_array_equal(x1.grad, x2.grad)


def test_grad_shape_matches_value():
    W = ad.parameter(np.ones((3, 2)))
    b = ad.parameter(np.zeros(2))
    x = np.ones((4, 5, 3))
    backward(ad.sum(ad.add(ad.matmul(x, W), b)))
    assert W.grad.shape == W.value.shape and b.grad.shape == b.value.shape


def test_constant_subgraph_keeps_no_parents():
    out = ad.add(Node([1.0]), Node([2.0]))
    assert out.is_leaf() and not out.requires_grad


def test_deep_chain_does_not_recurse():
    x = ad.parameter(0.5)
    y = x
    for _ in range(5000):
        y = ad.add(y, 0.0)
    backward(y)
    assert x.grad == 1.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = ad.softmax(Node(x)).value
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_log_is_clamped():
    assert ad.log(Node(0.0)).value == pytest.approx(math.log(1e-12))


def test_sigmoid_extremes_are_finite():
    v = ad.sigmoid(Node([-800.0, 800.0])).value
    assert np.all(np.isfinite(v)) and v[0] == 0.0 and v[1] == 1.0


# ---------------------------------------------------------------------------
# random graphs against central differences


def _random_graph(rng):
    """Build a scalar-valued graph over two parameters from the primitive set."""
    a = ad.parameter(rng.uniform(-1.5, 1.5, size=(2, 3)))
    b = ad.parameter(rng.uniform(-1.5, 1.5, size=(3, 3)))
    params = [a, b]
    ops = rng.choice(
        ["tanh", "sigmoid", "relu", "neg", "scale", "logsig", "softmax", "matmul", "mul", "add", "concat", "index",
         "reshape", "sum", "stack"],
        size=rng.integers(3, 8),
    )

    def build():
        x = a
        for op in ops:
            if op == "tanh":
                x = ad.tanh(x)
            elif op == "sigmoid":
                x = ad.sigmoid(x)
            elif op == "relu":
                x = ad.relu(ad.add(x, 0.3))
            elif op == "neg":
                x = ad.neg(x)
            elif op == "scale":
                x = ad.scale(x, 1.7)
            elif op == "logsig":
                x = ad.log(ad.sigmoid(x))
            elif op == "softmax":
                x = ad.softmax(x, axis=-1)
            elif op == "matmul":
                x = ad.matmul(x, b)
            elif op == "mul":
                x = ad.mul(x, ad.tanh(ad.matmul(a, b)))
            elif op == "add":
                x = ad.add(x, ad.index(b, (slice(0, 1), slice(None))))
            elif op == "concat":
                x = ad.index(ad.concat([x, a], axis=0), (slice(1, 3), slice(None)))
            elif op == "index":
                x = ad.mul(x, ad.sum(ad.index(x, (0, slice(None)))))
            elif op == "reshape":
                x = ad.reshape(ad.reshape(x, (6,)), (2, 3))
            elif op == "sum":
                x = ad.add(x, ad.sum(x, axis=1, keepdims=True))
            elif op == "stack":
                x = ad.sum(ad.stack([x, a], axis=0), axis=0)
        weights = np.linspace(0.5, 1.5, 6).reshape(2, 3)
        return ad.sum(ad.mul(x, weights))

    return build, params


def test_random_graphs_match_central_differences():
    checked = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        build, params = _random_graph(rng)
        group = ParamGroup("g", params, "shared")
        # the oracle's accuracy depends on the step; take the best of a small ladder
        err = min(finite_diff_check(build, [group], eps=e)["g"] for e in (1e-4, 1e-5, 1e-6))
        assert err < 1e-4, f"graph seed {seed}: relative error {err:.3e}"
        checked += 1
    assert checked == 100


# ---------------------------------------------------------------------------
# finite_diff_check and clipping


def test_fd_check_quadratic_is_exact():
    theta = ad.parameter([1.0, 2.0])
    group = ParamGroup("q", [theta], "shared")

    def loss():
        return ad.sum(ad.mul(theta, theta))

    theta.grad = None
    backward(loss())
    np.testing.assert_array_equal(theta.grad, [2.0, 4.0])
    assert finite_diff_check(loss, [group], eps=1e-5)["q"] < 1e-9


def test_fd_check_unused_group_reports_zero():
    used, unused = ad.parameter([0.5]), ad.parameter([3.0, -1.0])
    groups = [ParamGroup("used", [used], "shared"), ParamGroup("unused", [unused], "bilstm")]
    report = finite_diff_check(lambda: ad.sum(ad.tanh(used)), groups)
    assert report["unused"] == 0.0


def test_fd_check_detects_nondeterminism():
    p = ad.parameter([1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(ad.NondeterministicLoss):
        finite_diff_check(lambda: ad.sum(ad.mul(p, rng.random())), [ParamGroup("p", [p], "shared")])


def _with_grad(g):
    n = ad.parameter(np.zeros_like(np.asarray(g, dtype=float)))
    n.grad = np.array(g, dtype=float)
    return n


def test_clip_boundary_unchanged():
    n = _with_grad([3.0, 4.0])
    clip_gradient_norm([n], 5.0)
    np.testing.assert_array_equal(n.grad, [3.0, 4.0])


def test_clip_scales_down():
    n = _with_grad([6.0, 8.0])
    clip_gradient_norm([n], 5.0)
    np.testing.assert_allclose(n.grad, [3.0, 4.0], rtol=0, atol=1e-15)


def test_clip_zero_gradient():
    n = _with_grad([0.0, 0.0])
    clip_gradient_norm([n], 5.0)
    np.testing.assert_array_equal(n.grad, [0.0, 0.0])


def test_clip_empty_group_is_noop():
    clip_gradient_norm(ParamGroup("empty", [], "shared"), 5.0)


def test_clip_is_per_tensor_by_default():
    a, b = _with_grad([6.0, 8.0]), _with_grad([0.3, 0.4])
    clip_gradient_norm([a, b], 5.0)
    np.testing.assert_allclose(a.grad, [3.0, 4.0])
    np.testing.assert_array_equal(b.grad, [0.3, 0.4])


def test_clip_global_norm_flag():
    a, b = _with_grad([6.0, 8.0]), _with_grad([0.0, 0.0])
    clip_gradient_norm([a, b], 5.0, global_norm=True)
    np.testing.assert_allclose(a.grad, [3.0, 4.0])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)),
    st.floats(1e-3, 1e3),
)
def test_clip_never_increases_norm(g, max_norm):
    n = _with_grad(g)
    before = np.linalg.norm(g)
    clip_gradient_norm([n], max_norm)
    after = np.linalg.norm(n.grad)
    assert after <= before + 1e-9 * max(1.0, before)
    assert after <= max_norm + 1e-9 * max(1.0, max_norm)


def test_param_group_requires_aspect_for_per_aspect():
    with pytest.raises(ValueError):
        ParamGroup("x", [], "per_aspect")
    with pytest.raises(ValueError):
        ParamGroup("x", [], "nonsense")
    assert ParamGroup("x", [], "per_aspect", 1).aspect == 1
