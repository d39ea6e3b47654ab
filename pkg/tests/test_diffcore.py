import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperadapt import diffcore as dc


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def test_relu_forward():
    assert np.array_equal(dc.relu(dc.constant([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])


def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3))
    assert np.array_equal(dc.matmul(dc.constant(np.eye(3)), dc.constant(m)).value, m)


def test_conv_valid_all_ones():
    out = dc.conv2d(dc.constant(np.ones((1, 1, 3, 3))), dc.constant(np.ones((1, 1, 3, 3))), "valid")
    assert out.value.shape == (1, 1, 1, 1)
    assert out.value[0, 0, 0, 0] == 9.0


def test_conv_records_extents():
    node = dc.conv2d(dc.constant(np.ones((2, 3, 5, 5))), dc.parameter(np.ones((4, 3, 3, 1))), "valid")
    assert node.ctx["k"] == (3, 1)
    assert (node.ctx["c_in"], node.ctx["c_out"]) == (3, 4)


def test_product_rule():
    x, y = dc.parameter(2.0), dc.parameter(3.0)
    g = dc.backward(x * y)
    assert g[x] == 3.0 and g[y] == 2.0


def test_mean_relu_subgradient():
    x = dc.parameter([-1.0, 4.0])
    g = dc.backward(dc.mean(dc.relu(x)))
    assert np.array_equal(g[x], [0.0, 0.5])


def test_relu_subgradient_at_zero_is_zero():
    x = dc.parameter([0.0, 1.0])
    g = dc.backward(dc.mean(dc.relu(x)))
    assert g[x][0] == 0.0


def test_matmul_chain_matches_finite_differences(rng):
    graph = dc.Graph(
        lambda f, p: dc.mean(dc.relu(f["x"] @ p["w1"]) @ p["w2"]),
        {"w1": rng.normal(size=(3, 4)), "w2": rng.normal(size=(4, 3))},
        {"x": (4, 3)},
    )
    report = dc.check_gradients(graph, {"x": rng.normal(size=(4, 3))}, eps=1e-5, tol=1e-6)
    assert all(r.passed for r in report.values()), report


def test_linear_layer_ten_weights(rng):
    graph = dc.Graph(lambda f, p: dc.mean((f["x"] @ p["w"]) * (f["x"] @ p["w"])),
                     {"w": rng.normal(size=(5, 2))}, {"x": (None, 5)})
    report = dc.check_gradients(graph, {"x": rng.normal(size=(7, 5))})
    assert report["w"].passed and report["w"].max_rel_error <= 1e-6


def test_disconnected_parameter_passes(rng):
    graph = dc.Graph(lambda f, p: dc.mean(f["x"] * p["used"]),
                     {"used": rng.normal(size=3), "unused": rng.normal(size=2)}, {"x": (3,)})
    report = dc.check_gradients(graph, {"x": rng.normal(size=3)})
    assert report["unused"].max_rel_error == 0.0 and report["unused"].passed


def test_modulation_gradient_equals_unit_scale_gradient(rng):
    from hyperadapt.adapters import apply_modulation

    theta = rng.normal(size=(3, 2, 3, 3))
    x = rng.normal(size=(2, 2, 5, 5))

    def loss(kernel):
        return dc.mean(dc.relu(dc.conv2d(dc.constant(x), kernel, "same")))

    m = dc.parameter(np.zeros((3, 2)))
    s = dc.parameter(np.ones((3, 2)))
    gm = dc.backward(loss(apply_modulation(dc.constant(theta), m)))[m]
    gs = dc.backward(loss(dc.constant(theta) * dc.reshape(s, (3, 2, 1, 1))))[s]
    assert np.max(dc.relative_error(gm, gs)) <= 1e-12
    graph = dc.Graph(lambda f, p: loss(apply_modulation(dc.constant(theta), p["M"])),
                     {"M": np.zeros((3, 2))}, {})
    assert dc.check_gradients(graph, {})["M"].passed


# --- every primitive against central differences, three sizes each -----

def _primitive_graphs(rng, n):
    a = away_from_zero(rng, (n, n + 1))
    b = rng.normal(size=(n + 1, 2))
    return {
        "add": (lambda f, p: dc.mean((p["a"] + p["c"]) * (p["a"] + p["c"])),
                {"a": a, "c": rng.normal(size=(n + 1,))}),
        "mul": (lambda f, p: dc.mean(p["a"] * p["c"]), {"a": a, "c": rng.normal(size=(1, n + 1))}),
        "scale": (lambda f, p: dc.mean(dc.scale(p["a"], -2.5) * p["a"]), {"a": a}),
        "relu": (lambda f, p: dc.mean(dc.relu(p["a"]) * p["a"]), {"a": a}),
        "mean": (lambda f, p: dc.mean(dc.mean(p["a"] * p["a"], axis=0) * p["c"]),
                 {"a": a, "c": rng.normal(size=(n + 1,))}),
        "reshape": (lambda f, p: dc.mean(dc.reshape(p["a"], (n + 1, n)) @ p["d"]),
                    {"a": a, "d": rng.normal(size=(n, 2))}),
        "matmul": (lambda f, p: dc.mean((p["a"] @ p["b"]) * (p["a"] @ p["b"])), {"a": a, "b": b}),
        "batched_matmul": (lambda f, p: dc.mean(p["t"] @ p["b"]),
                           {"t": rng.normal(size=(2, n, n + 1)), "b": b}),
        "lowrank_product": (lambda f, p: dc.mean(dc.lowrank_product(p["t"], p["u"]) * p["v"]),
                            {"t": rng.normal(size=(2, n, 3)), "u": rng.normal(size=(3, n + 1)),
                             "v": rng.normal(size=(n, n + 1))}),
        "gather": (lambda f, p: dc.mean(dc.gather(p["table"], f["idx"]) * p["c"]),
                   {"table": rng.normal(size=(n + 1, 3)), "c": rng.normal(size=(3,))}),
        "concat": (lambda f, p: dc.mean(dc.concat([p["a"], p["e"]], axis=1) * dc.concat([p["e"], p["a"]], axis=1)),
                   {"a": a, "e": rng.normal(size=(n, 2))}),
        "softmax_xent": (lambda f, p: dc.softmax_xent(p["a"] @ p["b"], f["labels"]), {"a": a, "b": b}),
        "conv2d_same": (lambda f, p: dc.mean(dc.relu(dc.conv2d(p["x"], p["w"], "same"))),
                        {"x": away_from_zero(rng, (2, 2, n + 2, n + 2)), "w": rng.normal(size=(3, 2, 3, 3))}),
        "conv2d_valid_per_sample": (lambda f, p: dc.mean(dc.conv2d(p["x"], p["w"], "valid") * p["c"]),
                                    {"x": rng.normal(size=(2, 2, n + 2, n + 2)),
                                     "w": rng.normal(size=(2, 3, 2, 3, 3)),
                                     "c": rng.normal(size=(n,))}),
    }


@pytest.mark.parametrize("n", [1, 2, 4])
def test_every_primitive_gradient(n):
    rng = np.random.default_rng(n)
    feeds = {"idx": np.array([0, n, 1 % (n + 1), 0]), "labels": np.arange(n) % 2}
    for op, (build, params) in _primitive_graphs(rng, n).items():
        graph = dc.Graph(build, params, {"idx": (None,), "labels": (None,)})
        report = dc.check_gradients(graph, feeds, eps=1e-5, tol=1e-6)
        for name, r in report.items():
            assert r.passed, (op, name, r.max_rel_error)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_unbroadcast_inverts_broadcast_sum(rows, cols, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(rows, cols))
    assert np.allclose(dc.unbroadcast(g, (cols,)), g.sum(axis=0))
    assert np.allclose(dc.unbroadcast(g, (rows, 1)), g.sum(axis=1, keepdims=True))
    assert dc.unbroadcast(g, ()).shape == ()


def test_backward_requires_scalar():
    with pytest.raises(dc.ShapeError):
        dc.backward(dc.parameter([1.0, 2.0]) * 2.0)


def test_missing_adjoint():
    x = dc.parameter([1.0])
    weird = dc.Node(np.array(1.0), op="not_registered", inputs=(x,), requires_grad=True)
    with pytest.raises(dc.MissingAdjointError):
        dc.backward(weird)


def test_non_finite_is_reported():
    big = dc.parameter(1e308)
    with np.errstate(over="ignore"), pytest.raises(dc.NonFiniteError):
        big * big


def test_feed_shape_mismatch():
    graph = dc.Graph(lambda f, p: dc.mean(f["x"] * p["w"]), {"w": np.ones(3)}, {"x": (3,)})
    with pytest.raises(dc.ShapeError):
        dc.forward(graph, {"x": np.ones(4)})
    with pytest.raises(dc.ShapeError):
        dc.forward(graph, {})


def test_forward_is_deterministic_and_pure(rng):
    w = rng.normal(size=(3, 2, 3, 3))
    before = w.copy()
    graph = dc.Graph(lambda f, p: dc.mean(dc.conv2d(f["x"], p["w"])), {"w": w}, {"x": (None, 2, 6, 6)})
    x = rng.normal(size=(2, 2, 6, 6))
    a, b = dc.forward(graph, {"x": x}), dc.forward(graph, {"x": x})
    assert a.tobytes() == b.tobytes()
    assert np.array_equal(graph.params["w"], before)


def test_gradient_map_covers_every_reachable_parameter(rng):
    a, b = dc.parameter(rng.normal(size=(2, 2))), dc.parameter(rng.normal(size=2))
    hidden = dc.relu(a @ dc.constant(np.ones((2, 2)))) + b
    grads = dc.backward(dc.mean(hidden))
    for node in (a, b, hidden):
        assert node in grads and grads[node].shape == node.shape


def test_shared_and_per_sample_kernels_agree_bitwise(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    shared = dc.conv2d(dc.constant(x), dc.constant(w)).value
    tiled = dc.conv2d(dc.constant(x), dc.constant(np.broadcast_to(w, (3,) + w.shape).copy())).value
    assert shared.tobytes() == tiled.tobytes()
