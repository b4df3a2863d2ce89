import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qnn.core import Network, Tensor, backward, build_template, exact_accumulation, functional as F, im2col
from qnn.core.container import load_network, read_model, save_network, write_matrix, read_matrix
from qnn.core.optim import SGD, sgd_step
from qnn.core.spec import LayerSpec, ModelSpec
from qnn.errors import ConfigError, GraphStateError, NumericError, ParseError, ShapeError

from gradcases import CASES
from oracles import conv_nested, gradcheck


# -- im2col / conv -----------------------------------------------------------

def test_im2col_1x1_is_reshape():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    np.testing.assert_array_equal(im2col(x, (1, 1)), [[1], [2], [3], [4]])


def test_im2col_zeros_3x3_single_row():
    out = im2col(np.zeros((1, 1, 3, 3)), (3, 3))
    assert out.shape == (1, 9) and not out.any()


def test_im2col_rows_are_output_positions():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    assert im2col(x, (3, 3), stride=2, pad=1).shape == (2 * 3 * 3, 3 * 9)


def test_conv_matches_nested_loops_fixed():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    got = F.conv2d(x, w).data
    np.testing.assert_allclose(got, conv_nested(x, w), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), k=st.sampled_from([1, 2, 3]),
       stride=st.integers(1, 2), pad=st.integers(0, 1), h=st.integers(3, 6), seed=st.integers(0, 10**6))
def test_conv_matches_nested_loops(n, c, f, k, stride, pad, h, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((n, c, h, h)), rng.standard_normal((f, c, k, k))
    ref = conv_nested(x, w, stride, pad)
    got = F.conv2d(x, w, stride, pad).data
    assert np.max(np.abs(got - ref)) <= 1e-12 * max(1.0, np.abs(ref).max())


def test_conv_channel_mismatch_names_dims():
    with pytest.raises(ShapeError, match="3 channels"):
        F.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)))


def test_exact_accumulation_matches_blas_closely():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))
    with exact_accumulation():
        exact = F.conv2d(x, w, 1, 1).data
    np.testing.assert_allclose(exact, F.conv2d(x, w, 1, 1).data, rtol=1e-12, atol=1e-12)


def test_exact_accumulation_ignores_zero_terms_and_order():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 2))
    perm = rng.permutation(6)
    a0 = np.concatenate([a, np.zeros((4, 3))], axis=1)
    b0 = np.concatenate([b, rng.standard_normal((3, 2))], axis=0)
    with exact_accumulation():
        r1 = F.matmul(a, b).data
        r2 = F.matmul(a[:, perm], b[perm]).data
        r3 = F.matmul(a0, b0).data
    assert np.array_equal(r1, r2) and np.array_equal(r1, r3)


# -- forward ---------------------------------------------------------------

def test_identity_graph():
    x = Tensor([1.0, 2.0])
    np.testing.assert_array_equal(F.reshape(x, (2,)).data, [1.0, 2.0])


def test_linear_identity():
    out = F.linear(np.array([[3.0, -1.0]]), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.data, [[3.0, -1.0]])


def test_mlp_matches_matrix_arithmetic():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 3))
    w1, b1, w2, b2 = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal((2, 4)), rng.standard_normal(2)
    got = F.linear(F.relu(F.linear(x, w1, b1)), w2, b2).data
    h = x @ w1.T + b1
    h[h < 0] = 0
    np.testing.assert_allclose(got, h @ w2.T + b2, rtol=0, atol=1e-12)


def test_forward_deterministic():
    spec = build_template("toy_resnet", base=2, weight_bits=1, act_bits=1)
    x = np.random.default_rng(0).standard_normal((4, 1, 8, 8))
    a = Network(spec, seed=3).forward(x).data
    b = Network(spec, seed=3).forward(x).data
    assert np.array_equal(a, b)


def test_non_finite_names_op():
    with pytest.raises(NumericError, match="log"):
        F.log(np.array([0.0, 1.0]))


def test_network_rejects_wrong_input_shape():
    net = Network(build_template("mlp", in_features=2))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((3, 5)))


# -- backward --------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_half_square_norm():
    x = Tensor([3.0, -4.0], requires_grad=True)
    backward(F.mul(F.sum(F.mul(x, x)), 0.5))
    np.testing.assert_array_equal(x.grad, [3.0, -4.0])


def test_mlp_cross_entropy_gradcheck():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)

    def build(w1, b1, w2, b2):
        return F.cross_entropy(F.linear(F.tanh(F.linear(x, w1, b1)), w2, b2), y)

    arrays = [rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal((3, 4)), rng.standard_normal(3)]
    assert gradcheck(build, arrays) <= 1e-6


def test_backward_repeatable_after_zeroing():
    rng = np.random.default_rng(6)
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    loss = F.sum(F.tanh(F.matmul(rng.standard_normal((4, 3)), w)))
    backward(loss)
    first = w.grad.copy()
    w.zero_grad()
    backward(loss)
    assert np.array_equal(first, w.grad)


def test_backward_without_graph_is_state_error():
    with pytest.raises(GraphStateError):
        backward(Tensor([1.0]))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(F.mul(x, 2.0))


def test_diamond_graph_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = F.mul(x, x)
    backward(F.sum(F.add(y, y)))
    np.testing.assert_array_equal(x.grad, [8.0])


@pytest.mark.parametrize("name", sorted(k for k in CASES if not k.startswith("quantized_net")))
def test_op_gradients(name):
    for seed in range(20):
        assert gradcheck(*CASES[name](seed)) <= 1e-6, seed


# -- batch norm ------------------------------------------------------------

def test_bn_identity_on_standardised_batch():
    x = np.random.default_rng(7).standard_normal((64, 3))
    x = (x - x.mean(0)) / x.std(0)
    out = F.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True, eps=0.0).data
    np.testing.assert_allclose(out, x, rtol=0, atol=1e-6)
    # the default epsilon shrinks the output by exactly 1/sqrt(1 + eps)
    out = F.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=0, atol=1e-12)


def test_bn_zero_gamma_gives_beta():
    x = np.random.default_rng(8).standard_normal((10, 2, 3, 3))
    beta = np.array([0.7, -1.2])
    out = F.batch_norm(x, np.array([1.0, 0.0]), beta, np.zeros(2), np.ones(2), training=True).data
    assert np.all(out[:, 1] == beta[1])


def test_bn_output_statistics():
    rng = np.random.default_rng(9)
    x = 3 * rng.standard_normal((200, 4)) + 5
    g, b = rng.uniform(0.5, 2, 4), rng.standard_normal(4)
    out = F.batch_norm(x, g, b, np.zeros(4), np.ones(4), training=True, eps=0.0).data
    np.testing.assert_allclose(out.mean(0), b, atol=1e-5)
    np.testing.assert_allclose(out.std(0), g, atol=1e-5)


def test_bn_running_stats_update():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((8, 2)) + 1
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.9)
    np.testing.assert_allclose(rm, 0.1 * x.mean(0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(0, ddof=1))


def test_bn_zero_variance_channel_is_finite():
    x = np.ones((4, 2))
    out = F.batch_norm(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True).data
    assert np.all(np.isfinite(out)) and np.all(out == 0)


def test_bn_eval_is_fixed_affine():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((5, 3))
    args = (rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3), rng.uniform(1, 2, 3))
    a = F.batch_norm(x, *args, training=False).data
    b = F.batch_norm(x, *args, training=False).data
    assert np.array_equal(a, b)


# -- SGD -------------------------------------------------------------------

def test_sgd_single_step():
    (p,), _ = sgd_step([np.array(1.0)], [np.array(1.0)], lr=0.1)
    assert p == pytest.approx(0.9, abs=0)


def test_sgd_zero_lr_keeps_params():
    p0 = np.random.default_rng(0).standard_normal(5)
    (p,), _ = sgd_step([p0], [np.ones(5)], lr=0.0, weight_decay=0.1, momentum=0.9)
    assert np.array_equal(p, p0)


def test_sgd_quadratic_bowl():
    p = np.array(1.0)
    for _ in range(10):
        (p,), _ = sgd_step([p], [p], lr=0.5)
    assert p == 2.0 ** -10


def test_sgd_momentum_and_decay_recurrence():
    p, buf = np.array(1.0), [None]
    ps = []
    for _ in range(3):
        (p,), buf = sgd_step([p], [np.array(0.5)], lr=0.1, weight_decay=0.2, momentum=0.9, buffers=buf)
        ps.append(float(p))
    # v1 = 0.5 + 0.2*1 = 0.7; p1 = 0.93; v2 = 0.5 + 0.186 + 0.63 = 1.316; p2 = 0.7984
    assert ps[0] == pytest.approx(0.93, abs=1e-15)
    assert ps[1] == pytest.approx(0.7984, abs=1e-15)


def test_sgd_non_finite_aborts():
    t = Tensor(np.ones(2), requires_grad=True)
    t.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError):
        SGD([t]).step()
    assert np.array_equal(t.data, np.ones(2))


# -- specs and container ---------------------------------------------------

def test_spec_validation_requires_full_precision_ends():
    spec = build_template("mlp")
    spec.layers[0].weight_bits = 1
    with pytest.raises(ConfigError):
        spec.validate()


def test_spec_shape_mismatch():
    spec = ModelSpec([LayerSpec("linear", 3, 2)], (4,), 2)
    with pytest.raises(ShapeError, match="4 input features"):
        spec.validate()


def test_param_count_matches_network():
    for name in ("toy_resnet", "small_cnn", "mlp", "resnet20"):
        spec = build_template(name)
        assert spec.param_count() == Network(spec).param_count()


def test_container_roundtrip(tmp_path):
    net = Network(build_template("toy_resnet", base=2, weight_bits=1, act_bits=1), seed=1)
    save_network(tmp_path / "m.qnnf", net, {"ABCD": b"xyz"})
    back, sections = load_network(tmp_path / "m.qnnf")
    x = np.random.default_rng(0).standard_normal((3, 1, 8, 8))
    assert np.array_equal(net.forward(x).data, back.forward(x).data)
    assert sections == {"ABCD": b"xyz"}
    raw = (tmp_path / "m.qnnf").read_bytes()
    assert raw[:4] == b"QNNF" and int.from_bytes(raw[4:8], "little") == 1


def test_container_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ParseError, match="offset 0"):
        read_model(tmp_path / "x")


def test_container_truncated(tmp_path):
    net = Network(build_template("mlp"))
    save_network(tmp_path / "m", net)
    data = (tmp_path / "m").read_bytes()
    (tmp_path / "t").write_bytes(data[:-5])
    with pytest.raises(ParseError, match="truncated"):
        read_model(tmp_path / "t")


def test_matrix_roundtrip(tmp_path):
    m = np.random.default_rng(0).standard_normal((4, 3))
    write_matrix(tmp_path / "m.bin", m)
    assert np.array_equal(read_matrix(tmp_path / "m.bin"), m)
    assert (tmp_path / "m.bin").stat().st_size == 16 + 8 * 12
