import numpy as np
import pytest

from taskspan import autodiff as ad
from taskspan.autodiff import ShapeError
from taskspan.composition import (
    CompositionalLayer,
    CompositionalMatrix,
    ParameterSet,
    build_structured_multihead,
    compose,
    init_identical,
    init_w,
)
from taskspan.errors import ConfigError
from taskspan.networks import LayerDef, flat_forward_critic, flat_offsets

from .test_autodiff import assert_grad_close, finite_diff_grad


def make_layers(compositional=True):
    return [
        LayerDef("net.h0", 4, 6, "actor", "hidden", compositional),
        LayerDef("net.out", 6, 2, "actor", "output", compositional),
    ]


def make_phi(layers, k, seed=0):
    rng = np.random.default_rng(seed)
    n = sum(l.param_count for l in layers)
    return ParameterSet(rng.standard_normal((k, n)), layers)


# ---------------------------------------------------------------------------
# compose


def test_compose_one_hot_selects_column():
    phi = np.array([[1.0, 3.0], [2.0, 4.0]])  # rows are basis vectors
    assert np.array_equal(compose(phi, [1.0, 0.0]), [1.0, 3.0])


def test_compose_midpoint():
    phi = np.array([[1.0, 3.0], [2.0, 4.0]])
    assert np.array_equal(compose(phi, [0.5, 0.5]), [1.5, 3.5])


def test_compose_against_dot_product_oracle():
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((5, 50))
    w = rng.standard_normal(5)
    expected = np.array([sum(w[i] * phi[i, j] for i in range(5)) for j in range(50)])
    assert np.max(np.abs(compose(phi, w) - expected)) < 1e-12


def test_compose_length_mismatch():
    with pytest.raises(ShapeError):
        compose(np.zeros((3, 10)), np.zeros(4))


def test_compose_column_selection_exact():
    phi = make_phi(make_layers(), k=4, seed=1)
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1.0
        assert np.array_equal(compose(phi, e), phi.column(i))


def test_compose_linearity():
    rng = np.random.default_rng(2)
    phi = rng.standard_normal((4, 30))
    u, v = rng.standard_normal(4), rng.standard_normal(4)
    a, b = 0.3, -1.7
    lhs = compose(phi, a * u + b * v)
    rhs = a * compose(phi, u) + b * compose(phi, v)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


# ---------------------------------------------------------------------------
# compositional layer forward


def test_k1_unit_weight_is_bitwise_plain_affine():
    layers = make_layers()
    phi = make_phi(layers, k=1, seed=3)
    layer = phi.layer("net.h0")
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 4))
    out = layer.forward(ad.tensor(x), ad.tensor(np.array([1.0])))
    plain = x @ layer.weight_bank[0] + layer.bias_bank[0]
    assert out.data.tobytes() == plain.tobytes()


def test_zero_weights_annihilate():
    layers = make_layers()
    phi = make_phi(layers, k=3, seed=5)
    layer = phi.layer("net.h0")
    x = np.random.default_rng(6).standard_normal((7, 4))
    out = layer.forward(ad.tensor(x), ad.tensor(np.zeros(3)))
    assert np.array_equal(out.data, np.zeros((7, 6)))


def test_forward_matches_compose_weights_first_oracle():
    layers = make_layers()
    phi = make_phi(layers, k=3, seed=7)
    layer = phi.layer("net.h0")
    rng = np.random.default_rng(8)
    x = rng.standard_normal((6, 4))
    w = rng.standard_normal(3)
    out = layer.forward(ad.tensor(x), ad.tensor(w))
    weight = sum(w[i] * layer.weight_bank[i] for i in range(3))
    bias = sum(w[i] * layer.bias_bank[i] for i in range(3))
    oracle = x @ weight + bias
    assert np.max(np.abs(out.data - oracle)) < 1e-12


def test_forward_gradients_match_finite_differences():
    layers = make_layers()
    phi = make_phi(layers, k=3, seed=9)
    layer = phi.layer("net.h0")
    rng = np.random.default_rng(10)
    x = rng.uniform(-2, 2, (4, 4))
    w = ad.param(rng.uniform(-1, 1, 3))
    probe = rng.standard_normal((4, 6))

    def loss():
        out = layer.forward(ad.tensor(x), w)
        return ad.sum_all(ad.mul(out, ad.tensor(probe)))

    grads = ad.backward(loss())
    assert_grad_close(grads.grad(w), finite_diff_grad(lambda: loss().item(), w.data))
    assert_grad_close(grads.grad(phi.tensor),
                      finite_diff_grad(lambda: loss().item(), phi.data))


def test_gradient_flow_scales_with_w():
    # d(loss)/d(basis_i) must equal w_i * d(loss)/d(theta) at the composed point
    layers = make_layers()
    phi = make_phi(layers, k=3, seed=11)
    rng = np.random.default_rng(12)
    x = rng.uniform(-1, 1, (5, 4))
    w = rng.uniform(-1, 1, 3)
    probe = rng.standard_normal((5, 2))

    def graph_loss():
        wt = ad.tensor(w)
        h = ad.relu(phi.layer("net.h0").forward(ad.tensor(x), wt))
        out = phi.layer("net.out").forward(h, wt)
        return ad.sum_all(ad.mul(out, ad.tensor(probe)))

    grads = ad.backward(graph_loss())
    g_phi = grads.grad(phi.tensor)

    theta = compose(phi, w)

    def theta_loss(vec):
        offsets = flat_offsets(layers)
        w0, b0, end = offsets["net.h0"]
        h = np.maximum(x @ vec[w0:b0].reshape(4, 6) + vec[b0:end], 0.0)
        w0, b0, end = offsets["net.out"]
        out = h @ vec[w0:b0].reshape(6, 2) + vec[b0:end]
        return float(np.sum(out * probe))

    g_theta = finite_diff_grad(lambda: theta_loss(theta), theta)
    for i in range(3):
        assert_grad_close(g_phi[i], w[i] * g_theta, tol=2e-4)


def test_two_composition_orders_agree():
    # composing parameters first then running the net == per-layer forward
    layers = make_layers()
    phi = make_phi(layers, k=4, seed=13)
    rng = np.random.default_rng(14)
    x = rng.standard_normal((6, 4))
    w = rng.standard_normal(4)

    wt = ad.tensor(w)
    h = ad.relu(phi.layer("net.h0").forward(ad.tensor(x), wt))
    per_layer = phi.layer("net.out").forward(h, wt).data

    theta = compose(phi, w)
    offsets = flat_offsets(layers)
    w0, b0, end = offsets["net.h0"]
    h_np = np.maximum(x @ theta[w0:b0].reshape(4, 6) + theta[b0:end], 0.0)
    w0, b0, end = offsets["net.out"]
    composed_first = h_np @ theta[w0:b0].reshape(6, 2) + theta[b0:end]
    assert np.max(np.abs(per_layer - composed_first)) < 1e-10


# ---------------------------------------------------------------------------
# initialization


def test_init_identical_columns_bitwise_equal():
    layers = make_layers()
    phi = init_identical(layers, 3, np.random.default_rng(15))
    assert phi[0].tobytes() == phi[1].tobytes() == phi[2].tobytes()


def test_init_identical_composition_is_scalar_multiple():
    layers = make_layers()
    phi = init_identical(layers, 3, np.random.default_rng(16))
    w = np.array([0.2, -1.0, 0.5])
    composed = compose(phi, w)
    assert np.allclose(composed, w.sum() * phi[0], atol=0.0)


def test_init_identical_deterministic():
    layers = make_layers()
    a = init_identical(layers, 4, np.random.default_rng(17))
    b = init_identical(layers, 4, np.random.default_rng(17))
    assert a.tobytes() == b.tobytes()


def test_init_w_one_hot_identity():
    mat = init_w(3, 3, "one-hot", np.random.default_rng(0))
    assert np.array_equal(mat, np.eye(3))


def test_init_w_one_hot_in_bigger_space():
    mat = init_w(3, 10, "one-hot", np.random.default_rng(0))
    assert mat.shape == (3, 10)
    expected = np.zeros((3, 10))
    expected[0, 0] = expected[1, 1] = expected[2, 2] = 1.0
    assert np.array_equal(mat, expected)


def test_init_w_one_hot_needs_enough_columns():
    with pytest.raises(ConfigError):
        init_w(5, 3, "one-hot", np.random.default_rng(0))


def test_init_w_random_reproducible():
    a = init_w(4, 5, "random", np.random.default_rng(21))
    b = init_w(4, 5, "random", np.random.default_rng(21))
    assert a.tobytes() == b.tobytes()
    assert a.shape == (4, 5)


def test_init_w_unknown_mode():
    with pytest.raises(ConfigError):
        init_w(2, 2, "sobol", np.random.default_rng(0))


# ---------------------------------------------------------------------------
# structured multi-head basis


def test_multihead_column_stacks_trunk_and_head():
    trunk = np.array([1.0, 2.0, 3.0])
    heads = [np.array([10.0, 20.0]), np.array([30.0, 40.0])]
    phi = build_structured_multihead(trunk, heads)
    assert np.array_equal(phi[0], [1.0, 2.0, 3.0, 10.0, 20.0])
    assert np.array_equal(phi[1], [1.0, 2.0, 3.0, 30.0, 40.0])


def test_multihead_head_shape_mismatch():
    with pytest.raises(ShapeError):
        build_structured_multihead(np.zeros(3), [np.zeros(2), np.zeros(4)])


def test_multihead_matches_reference_network():
    # composed one-hot policies must equal an independently built
    # shared-trunk / per-task-head network, output for output
    rng = np.random.default_rng(22)
    d_in, d_h, d_out, tasks = 5, 8, 3, 4
    trunk_w = rng.standard_normal((d_in, d_h))
    trunk_b = rng.standard_normal(d_h)
    head_ws = [rng.standard_normal((d_h, d_out)) for _ in range(tasks)]
    head_bs = [rng.standard_normal(d_out) for _ in range(tasks)]

    trunk_flat = np.concatenate([trunk_w.ravel(), trunk_b])
    heads = [np.concatenate([w.ravel(), b]) for w, b in zip(head_ws, head_bs)]
    phi = build_structured_multihead(trunk_flat, heads)

    x = rng.standard_normal((6, d_in))
    for tau in range(tasks):
        e = np.zeros(tasks)
        e[tau] = 1.0
        theta = compose(phi, e)
        w0 = d_in * d_h
        h = np.maximum(x @ theta[:w0].reshape(d_in, d_h) + theta[w0:w0 + d_h], 0.0)
        off = w0 + d_h
        out = h @ theta[off:off + d_h * d_out].reshape(d_h, d_out) \
            + theta[off + d_h * d_out:]
        reference = np.maximum(x @ trunk_w + trunk_b, 0.0) @ head_ws[tau] + head_bs[tau]
        assert np.max(np.abs(out - reference)) < 1e-12


def test_k1_shared_model_composes_to_the_single_vector():
    layers = make_layers()
    phi = make_phi(layers, k=1, seed=23)
    w = np.array([1.0])
    for _ in range(3):
        assert np.array_equal(compose(phi, w), phi.column(0))


# ---------------------------------------------------------------------------
# compositional matrix


def test_normalize_flag_produces_unit_vectors():
    rng = np.random.default_rng(24)
    mat = CompositionalMatrix(rng.standard_normal((3, 4)), normalize=True)
    for tau in range(3):
        used = mat.used(tau)
        assert abs(np.linalg.norm(used.data) - 1.0) < 1e-12
        assert abs(np.linalg.norm(mat.used_np(tau)) - 1.0) < 1e-12


def test_matrix_export_orientation():
    vals = np.arange(6.0).reshape(3, 2)  # 3 tasks, k=2
    mat = CompositionalMatrix(vals)
    out = mat.as_matrix()
    assert out.shape == (2, 3)
    assert np.array_equal(out[:, 1], vals[1])


# ---------------------------------------------------------------------------
# freeze


def test_freeze_marks_not_trainable_and_unfreeze_restores():
    layers = make_layers()
    phi = make_phi(layers, k=2, seed=25)
    assert phi.trainable
    phi.freeze()
    assert not phi.trainable
    phi.unfreeze()
    assert phi.trainable
