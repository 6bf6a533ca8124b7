import numpy as np
import pytest

from physop import autodiff as ad
from physop import nets
from physop.nets import HiddenPhysicsNet, MlpSpec, OperatorModel


def small_model(seed=0, branch_act="relu", m=7, p=4):
    branch = MlpSpec((m, 8, p), branch_act)
    trunk = MlpSpec((2, 8, p), "tanh")
    return OperatorModel.create(branch, trunk, seed)


# --------------------------------------------------------------------------
# MlpSpec / init


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((5,), "tanh")
    with pytest.raises(ValueError):
        MlpSpec((5, 0, 1), "tanh")
    with pytest.raises(ValueError):
        MlpSpec((5, 3, 1), "sigmoid")


def test_init_deterministic_per_seed():
    spec = MlpSpec((4, 4, 2), "tanh")
    a = nets.init_parameters(spec, 123)
    b = nets.init_parameters(spec, 123)
    c = nets.init_parameters(spec, 124)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_glorot_bound_for_square_layer():
    spec = MlpSpec((4, 4), "tanh")
    vec = nets.init_parameters(spec, 5)
    assert np.all(np.abs(vec) <= np.sqrt(6.0 / 8.0))


def test_param_count():
    spec = MlpSpec((3, 5, 2), "tanh")
    assert nets.init_parameters(spec, 0).size == spec.n_params() == (3 * 5 + 5) + (5 * 2 + 2)


# --------------------------------------------------------------------------
# forward_operator


def test_zeroed_branch_gives_zero_field():
    model = small_model()
    for name in model.store.names():
        if name.startswith("branch") or name == "b0":
            model.store.set(name, np.zeros_like(model.store.get(name)))
    op = nets.forward_operator(model, np.ones(7))
    vals = op.value([0.1, 0.5, 0.9], [0.2, 0.4, 0.8])
    assert np.allclose(vals, 0.0, atol=1e-15)


def test_rank_one_model_is_product_plus_bias():
    branch = MlpSpec((3, 2, 1), "tanh")
    trunk = MlpSpec((2, 2, 1), "tanh")
    model = OperatorModel.create(branch, trunk, 1)
    # Force branch output to constant c and trunk output to constant d.
    c, d, b0 = 1.7, -0.6, 0.25
    for name in model.store.names():
        arr = model.store.get(name)
        model.store.set(name, np.zeros_like(arr))
    model.store.set("branch.b1", np.array([[c]]))
    model.store.set("trunk.b1", np.array([[d]]))
    model.store.set("b0", np.array([[b0]]))
    op = nets.forward_operator(model, np.zeros(3))
    assert op.value([0.3], [0.7])[0] == pytest.approx(c * d + b0, rel=1e-14)


def test_forward_matches_independent_dense_math():
    rng = np.random.default_rng(8)
    model = small_model(seed=3)
    f = rng.normal(size=7)
    pts = rng.uniform(0, 1, size=(6, 2))

    def dense_mlp(x, spec, prefix):
        h = x
        n_layers = len(spec.widths) - 1
        for i in range(n_layers):
            h = h @ model.store.get(f"{prefix}.W{i}") + model.store.get(f"{prefix}.b{i}")
            if i < n_layers - 1:
                h = np.maximum(h, 0) if spec.activation == "relu" else np.tanh(h)
        return h

    b = dense_mlp(f.reshape(1, -1), model.branch, "branch")
    tr = dense_mlp(pts, model.trunk, "trunk")
    want = tr @ b.T + model.store.get("b0")
    got = model.predict(f, pts)
    assert np.allclose(got, want[:, 0], rtol=1e-12, atol=1e-14)


def test_sensor_count_mismatch():
    model = small_model()
    with pytest.raises(ad.ShapeError):
        nets.forward_operator(model, np.ones(9))


def test_relu_trunk_rejected():
    branch = MlpSpec((7, 8, 4), "tanh")
    trunk = MlpSpec((2, 8, 4), "relu")
    with pytest.raises(ValueError):
        OperatorModel.create(branch, trunk, 0)


def test_branch_trunk_width_mismatch_rejected():
    with pytest.raises(ValueError):
        OperatorModel.create(MlpSpec((7, 8, 4), "relu"), MlpSpec((2, 8, 5), "tanh"), 0)


# --------------------------------------------------------------------------
# derivatives


def test_zeroed_model_has_zero_derivatives():
    model = small_model()
    for name in model.store.names():
        model.store.set(name, np.zeros_like(model.store.get(name)))
    op = nets.forward_operator(model, np.ones(7))
    for var in ("x", "t"):
        for order in (1, 2):
            vals = op.derivative_value(var, order, [0.3, 0.6], [0.2, 0.9])
            assert np.allclose(vals, 0.0, atol=1e-15)


def test_derivative_rejects_bad_order():
    model = small_model()
    op = nets.forward_operator(model, np.zeros(7))
    with pytest.raises(ValueError):
        op.derivative("x", 3)
    with pytest.raises(ValueError):
        op.derivative("y", 1)


def test_ux_matches_finite_differences():
    rng = np.random.default_rng(21)
    worst = 0.0
    for k in range(100):
        model = small_model(seed=k)
        f = rng.normal(size=7)
        op = nets.forward_operator(model, f)
        x0, t0 = rng.uniform(0.1, 0.9, size=2)
        got = op.derivative_value("x", 1, [x0], [t0])[0]
        h = 1e-4
        want = (op.value([x0 + h], [t0])[0] - op.value([x0 - h], [t0])[0]) / (2 * h)
        worst = max(worst, abs(got - want) / max(abs(want), 1e-3))
    assert worst < 1e-4


def test_uxx_matches_finite_differences():
    rng = np.random.default_rng(22)
    worst = 0.0
    for k in range(30):
        model = small_model(seed=100 + k)
        f = rng.normal(size=7)
        op = nets.forward_operator(model, f)
        x0, t0 = rng.uniform(0.1, 0.9, size=2)
        got = op.derivative_value("x", 2, [x0], [t0])[0]
        h = 1e-3
        u = lambda x: op.value([x], [t0])[0]
        want = (u(x0 + h) - 2 * u(x0) + u(x0 - h)) / h**2
        worst = max(worst, abs(got - want) / max(abs(want), 1e-3))
    assert worst < 1e-3


def test_constant_trunk_gives_zero_spatial_derivative():
    model = small_model()
    for i in range(2):
        model.store.set(f"trunk.W{i}", np.zeros_like(model.store.get(f"trunk.W{i}")))
    op = nets.forward_operator(model, np.ones(7))
    assert np.allclose(op.derivative_value("x", 1, [0.4], [0.5]), 0.0, atol=1e-15)
    assert np.allclose(op.derivative_value("x", 2, [0.4], [0.5]), 0.0, atol=1e-15)


# --------------------------------------------------------------------------
# dot-product structure


def test_dot_product_symmetry():
    # Swapping the roles of the two latent vectors leaves u unchanged.
    rng = np.random.default_rng(4)
    b_vec = rng.normal(size=(1, 5))
    t_vec = rng.normal(size=(6, 5))
    bias = ad.constant(0.1)
    u1 = ad.evaluate_many([ad.add(ad.dot(ad.constant(t_vec), ad.transpose(ad.constant(b_vec))), bias)], {})[0]
    u2 = ad.evaluate_many([ad.add(ad.dot(ad.constant(b_vec), ad.transpose(ad.constant(t_vec))), bias)], {})[0]
    assert np.allclose(u1, u2.T)


def test_linearity_in_branch_output():
    # With b0 = 0, scaling every branch-side weight of the last layer
    # scales u by the same factor.
    model = small_model(seed=9)
    model.store.set("b0", np.zeros((1, 1)))
    f = np.linspace(-1, 1, 7)
    pts = np.array([[0.2, 0.3], [0.7, 0.8]])
    base = model.predict(f, pts)
    model.store.set("branch.W1", 3.0 * model.store.get("branch.W1"))
    model.store.set("branch.b1", 3.0 * model.store.get("branch.b1"))
    assert np.allclose(model.predict(f, pts), 3.0 * base, rtol=1e-12)


# --------------------------------------------------------------------------
# hidden net


def test_hidden_net_channel_check():
    net = HiddenPhysicsNet.create(MlpSpec((3, 4, 1), "tanh"), 0)
    with pytest.raises(ad.ShapeError):
        net.graph([ad.constant(np.zeros((2, 1)))] * 2)


def test_hidden_net_value_matches_dense():
    rng = np.random.default_rng(17)
    net = HiddenPhysicsNet.create(MlpSpec((3, 6, 1), "tanh"), 2)
    u, ux, uxx = rng.normal(size=(3, 5))
    x = np.stack([u, ux, uxx], axis=1) * np.asarray(net.channel_scales)
    h = np.tanh(x @ net.store.get("aux.W0") + net.store.get("aux.b0"))
    want = h @ net.store.get("aux.W1") + net.store.get("aux.b1")
    got = net.value(u, ux, uxx)
    assert np.allclose(got, want[:, 0], rtol=1e-12)


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    model = small_model(seed=11)
    ad.adam_step(model.store, np.random.default_rng(0).normal(size=model.store.n_params), 1e-3)
    nets.save_checkpoint(tmp_path / "ck", model.store,
                         {"kind": "test", "step": 7, "seed": 11})
    doc, params, adam = nets.load_checkpoint(tmp_path / "ck")
    assert doc["step"] == 7
    store2 = nets.restore_store(params, adam)
    assert np.array_equal(store2.theta, model.store.theta)
    assert np.array_equal(store2.m, model.store.m)
    assert store2.t == model.store.t == 1


def test_checkpoint_blob_is_little_endian_float64(tmp_path):
    model = small_model(seed=1)
    nets.save_checkpoint(tmp_path / "ck", model.store, {})
    blob = (tmp_path / "ck" / "b0.bin").read_bytes()
    assert len(blob) == 8
    assert np.frombuffer(blob, dtype="<f8")[0] == model.store.get("b0")[0, 0]
