import numpy as np
import pytest

from physop import autodiff as ad


# --------------------------------------------------------------------------
# Independent tree-walk interpreter used as the evaluation oracle.  It
# recurses over the graph with no memoization and plain Python dispatch,
# sharing nothing with the engine's topo-order evaluator.


def interpret(node, bindings):
    if node.op == "const":
        return node.data
    if node.op in ("input", "param"):
        arr = np.asarray(bindings[node.name], dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        return arr
    ch = [interpret(c, bindings) for c in node.children]
    if node.op == "add":
        return ch[0] + ch[1]
    if node.op == "mul":
        return ch[0] * ch[1]
    if node.op == "tanh":
        return np.tanh(ch[0])
    if node.op == "relu":
        return np.where(ch[0] > 0, ch[0], 0.0)
    if node.op == "softplus":
        return np.log1p(np.exp(-np.abs(ch[0]))) + np.maximum(ch[0], 0.0)
    if node.op == "step":
        return (ch[0] > 0).astype(float)
    if node.op == "sum":
        return np.sum(ch[0], axis=node.extra, keepdims=True)
    if node.op == "dot":
        return ch[0] @ ch[1]
    if node.op == "transpose":
        return ch[0].T
    if node.op == "hstack":
        return np.hstack(ch)
    if node.op == "bcast":
        return np.broadcast_to(ch[0], ch[1].shape).copy()
    if node.op == "reshape":
        kind, k = node.extra
        if kind == "flatten":
            return ch[0].reshape(-1, 1, order="F")
        return ch[0].reshape(-1, k, order="F")
    raise AssertionError(node.op)


def random_graph(rng, n_inputs=3, depth=3):
    """A random scalar-valued graph mixing all differentiable ops."""
    leaves = [ad.input_leaf(f"z{i}", (1, 1)) for i in range(n_inputs)]
    pool = list(leaves)
    for _ in range(depth * 4):
        op = rng.integers(0, 5)
        a = pool[rng.integers(0, len(pool))]
        b = pool[rng.integers(0, len(pool))]
        if op == 0:
            pool.append(ad.add(a, b))
        elif op == 1:
            pool.append(ad.mul(a, b))
        elif op == 2:
            pool.append(ad.tanh(a))
        elif op == 3:
            pool.append(ad.softplus(a))
        else:
            pool.append(ad.add(ad.mul(a, ad.constant(rng.normal())), b))
    root = pool[-1]
    for extra in pool[-4:-1]:
        root = ad.add(root, ad.mul(extra, ad.constant(0.5)))
    return root, leaves


def central_fd(f, x0, h):
    return (f(x0 + h) - f(x0 - h)) / (2 * h)


# --------------------------------------------------------------------------
# evaluate


def test_tanh_at_origin():
    assert ad.evaluate(ad.tanh(ad.constant(0.0))) == 0.0


def test_dot_vectors():
    assert ad.evaluate(ad.dot(ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))) == 11.0


def test_evaluate_matches_tree_walk_interpreter():
    rng = np.random.default_rng(7)
    for _ in range(20):
        root, leaves = random_graph(rng)
        bindings = {leaf.name: rng.normal() for leaf in leaves}
        got = ad.evaluate(root, bindings)
        want = float(interpret(root, bindings)[0, 0])
        assert got == pytest.approx(want, abs=1e-12)


def test_matrix_graph_matches_interpreter():
    rng = np.random.default_rng(3)
    x = ad.input_leaf("x", (None, 3))
    w = ad.param_leaf("w", (3, 4))
    b = ad.param_leaf("b", (1, 4))
    h = ad.tanh(ad.add(ad.dot(x, w), b))
    out = ad.sum_(ad.mul(h, h))
    bindings = {"x": rng.normal(size=(5, 3)), "w": rng.normal(size=(3, 4)),
                "b": rng.normal(size=(1, 4))}
    assert ad.evaluate(out, bindings) == pytest.approx(
        float(interpret(out, bindings)[0, 0]), rel=1e-14)


def test_missing_binding_raises():
    x = ad.input_leaf("x", (1, 1))
    with pytest.raises(ad.MissingBindingError):
        ad.evaluate(ad.tanh(x), {})


def test_evaluation_is_pure():
    rng = np.random.default_rng(11)
    root, leaves = random_graph(rng)
    bindings = {leaf.name: 0.3 for leaf in leaves}
    a = ad.evaluate(root, bindings)
    b = ad.evaluate(root, bindings)
    assert a == b  # bit identical


def test_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        ad.dot(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


# --------------------------------------------------------------------------
# grad


def test_grad_square():
    x = ad.input_leaf("x", (1, 1))
    (dx,) = ad.grad(ad.mul(x, x), [x])
    assert ad.evaluate(dx, {"x": 3.0}) == pytest.approx(6.0)


def test_second_derivative_tanh_at_zero():
    x = ad.input_leaf("x", (1, 1))
    (d1,) = ad.grad(ad.tanh(x), [x])
    (d2,) = ad.grad(d1, [x])
    assert ad.evaluate(d2, {"x": 0.0}) == pytest.approx(0.0, abs=1e-15)


def test_grad_rejects_nonscalar_root():
    x = ad.input_leaf("x", (None, 2))
    with pytest.raises(ad.RankError):
        ad.grad(ad.tanh(x), [x])


def test_grad_unreachable_leaf_is_zero():
    x = ad.input_leaf("x", (1, 1))
    y = ad.input_leaf("y", (1, 1))
    (dy,) = ad.grad(ad.mul(x, x), [y])
    assert ad.evaluate(dy, {"x": 2.0, "y": 5.0}) == 0.0


def test_grad_matches_finite_differences_on_random_graphs():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        root, leaves = random_graph(rng)
        values = {leaf.name: rng.uniform(-1, 1) for leaf in leaves}
        grads = ad.grad(root, leaves)
        for leaf, g in zip(leaves, grads):
            got = ad.evaluate(g, values)

            def f(v, leaf=leaf):
                b = dict(values)
                b[leaf.name] = v
                return ad.evaluate(root, b)

            want = central_fd(f, values[leaf.name], 1e-5)
            scale = max(abs(want), 1.0)
            worst = max(worst, abs(got - want) / scale)
    assert worst < 1e-5


def test_second_order_grad_matches_finite_differences():
    rng = np.random.default_rng(43)
    worst = 0.0
    for _ in range(25):
        root, leaves = random_graph(rng)
        values = {leaf.name: rng.uniform(-1, 1) for leaf in leaves}
        leaf = leaves[0]
        (d1,) = ad.grad(root, [leaf])
        (d2,) = ad.grad(d1, [leaf])
        got = ad.evaluate(d2, values)
        h = 1e-3

        def f(v):
            b = dict(values)
            b[leaf.name] = v
            return ad.evaluate(root, b)

        x0 = values[leaf.name]
        want = (f(x0 + h) - 2 * f(x0) + f(x0 - h)) / h**2
        scale = max(abs(want), 1.0)
        worst = max(worst, abs(got - want) / scale)
    assert worst < 1e-3


def test_grad_through_matrix_ops():
    rng = np.random.default_rng(5)
    x = ad.input_leaf("x", (None, 2))
    w = ad.param_leaf("w", (2, 3))
    loss = ad.sum_(ad.square(ad.tanh(ad.dot(x, w))))
    (dw,) = ad.grad(loss, [w])
    bindings = {"x": rng.normal(size=(4, 2)), "w": rng.normal(size=(2, 3))}
    got = ad.evaluate(dw, bindings)
    h = 1e-6
    want = np.zeros((2, 3))
    for i in range(2):
        for j in range(3):
            for sgn in (1, -1):
                b = {k: np.array(v, copy=True) for k, v in bindings.items()}
                b["w"][i, j] += sgn * h
                want[i, j] += sgn * ad.evaluate(loss, b) / (2 * h)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-8)


def test_tangent_matches_grad_on_scalar_graph():
    rng = np.random.default_rng(9)
    for _ in range(10):
        root, leaves = random_graph(rng)
        values = {leaf.name: rng.uniform(-1, 1) for leaf in leaves}
        leaf = leaves[1]
        t = ad.tangent(root, leaf)
        (g,) = ad.grad(root, [leaf])
        assert ad.evaluate(t, values) == pytest.approx(ad.evaluate(g, values), rel=1e-12)


def test_tangent_is_rowwise_derivative():
    # y_i = tanh(3 x_i); tangent should give dy_i/dx_i per row.
    x = ad.input_leaf("x", (None, 1))
    y = ad.tanh(ad.mul(ad.constant(3.0), x))
    t = ad.tangent(y, x)
    xs = np.linspace(-1, 1, 7).reshape(-1, 1)
    got = ad.evaluate_many([t], {"x": xs})[0]
    want = 3.0 / np.cosh(3 * xs) ** 2
    assert np.allclose(got, want, rtol=1e-12)


def test_third_order_flow():
    # d3/dx3 of tanh at 0 is -2.
    x = ad.input_leaf("x", (1, 1))
    d1 = ad.grad(ad.tanh(x), [x])[0]
    d2 = ad.grad(d1, [x])[0]
    d3 = ad.grad(d2, [x])[0]
    assert ad.evaluate(d3, {"x": 0.0}) == pytest.approx(-2.0, rel=1e-12)


def test_relu_derivative_zero_at_origin():
    x = ad.input_leaf("x", (1, 1))
    (d,) = ad.grad(ad.relu(x), [x])
    assert ad.evaluate(d, {"x": 0.0}) == 0.0
    assert ad.evaluate(d, {"x": 2.0}) == 1.0
    assert ad.evaluate(d, {"x": -2.0}) == 0.0


def test_softplus_value_and_derivative():
    x = ad.input_leaf("x", (1, 1))
    y = ad.softplus(x)
    assert ad.evaluate(y, {"x": 0.0}) == pytest.approx(np.log(2.0), rel=1e-14)
    (d,) = ad.grad(y, [x])
    assert ad.evaluate(d, {"x": 1.3}) == pytest.approx(1 / (1 + np.exp(-1.3)), rel=1e-12)


# --------------------------------------------------------------------------
# ParamStore / Adam


def make_store(rng):
    return ad.ParamStore({
        "w": rng.normal(size=(4, 3)),
        "b": rng.normal(size=(1, 3)),
    })


def test_store_roundtrip():
    rng = np.random.default_rng(0)
    store = make_store(rng)
    w = store.get("w").copy()
    store.set("w", w * 2)
    assert np.allclose(store.get("w"), w * 2)
    assert store.n_params == 15


def test_adam_zero_gradient_is_fixed_point():
    rng = np.random.default_rng(1)
    store = make_store(rng)
    before = store.theta.copy()
    ad.adam_step(store, np.zeros(store.n_params), lr=0.1)
    assert np.array_equal(store.theta, before)
    assert not np.any(store.m) and not np.any(store.v)
    assert store.t == 1


def test_adam_first_step_size():
    store = ad.ParamStore({"w": np.array([[0.0]])})
    ad.adam_step(store, np.array([1.0]), lr=0.1)
    # first step with bias correction: delta = -lr * g / (|g| + eps)
    assert store.theta[0] == pytest.approx(-0.1, rel=1e-6)
    assert store.t == 1


def test_adam_converges_on_quadratic():
    store = ad.ParamStore({"w": np.array([[1.0]])})
    for _ in range(1000):
        g = 2.0 * store.theta
        ad.adam_step(store, g, lr=1e-2)
    assert abs(store.theta[0]) < 1e-2


def test_adam_rejects_length_mismatch():
    store = ad.ParamStore({"w": np.ones((2, 2))})
    with pytest.raises(ad.ShapeError):
        ad.adam_step(store, np.zeros(3), lr=0.1)


def test_adam_step_counter_increments_by_one():
    store = ad.ParamStore({"w": np.ones((2, 1))})
    for k in range(5):
        ad.adam_step(store, np.ones(2), lr=1e-3)
        assert store.t == k + 1


def test_state_dict_roundtrip():
    rng = np.random.default_rng(2)
    store = make_store(rng)
    ad.adam_step(store, rng.normal(size=store.n_params), lr=1e-3)
    state = store.state_dict()
    other = make_store(np.random.default_rng(99))
    other.load_state(state)
    assert np.array_equal(other.theta, store.theta)
    assert np.array_equal(other.m, store.m)
    assert other.t == store.t
