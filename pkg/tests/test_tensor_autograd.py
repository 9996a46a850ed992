import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import conv3d_bruteforce
from egomtl import kernels, ops
from egomtl.errors import ConfigurationError, ContractError, DimensionError
from egomtl.gradcheck import check_gradients
from egomtl.tensor import Tensor, backward, build_graph, check_precision, no_grad


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- conv3d ------------------------------------------------------------------------

def test_conv3d_identity_kernel():
    x = Tensor(np.ones((1, 1, 2, 2, 2)))
    k = Tensor(np.ones((1, 1, 1, 1, 1)))
    out = ops.conv3d(x, k, Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv3d_all_ones_sums_to_eight():
    out = ops.conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == 8.0


def test_conv3d_matches_bruteforce_stride2_pad1(rng):
    x = rng.standard_normal((2, 3, 5, 6, 7))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    with check_precision():
        out = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(out.data, conv3d_bruteforce(x, w, b, (2, 2, 2), (1, 1, 1)), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(B=st.integers(1, 2), C=st.integers(1, 2), T=st.integers(1, 3), H=st.integers(1, 4), W=st.integers(1, 4),
       kt=st.integers(1, 3), kh=st.integers(1, 3), kw=st.integers(1, 3),
       s=st.tuples(st.integers(1, 2), st.integers(1, 2), st.integers(1, 2)),
       p=st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 1)), seed=st.integers(0, 2**16))
def test_conv3d_bruteforce_property(B, C, T, H, W, kt, kh, kw, s, p, seed):
    if T + 2 * p[0] < kt or H + 2 * p[1] < kh or W + 2 * p[2] < kw:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((B, C, T, H, W))
    w = r.standard_normal((2, C, kt, kh, kw))
    with check_precision():
        out = ops.conv3d(Tensor(x), Tensor(w), None, stride=s, padding=p)
    np.testing.assert_allclose(out.data, conv3d_bruteforce(x, w, None, s, p), atol=1e-9)


def test_conv3d_output_extent_formula():
    x = Tensor(np.zeros((1, 2, 7, 9, 10)))
    k = Tensor(np.zeros((3, 2, 3, 2, 3)))
    out = ops.conv3d(x, k, None, stride=(2, 3, 1), padding=(1, 0, 2))
    assert out.shape == (1, 3, (7 + 2 - 3) // 2 + 1, (9 - 2) // 3 + 1, (10 + 4 - 3) // 1 + 1)


def test_conv3d_channel_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3, 2, 2, 2\).*\(1, 2, 1, 1, 1\)"):
        ops.conv3d(Tensor(np.zeros((1, 3, 2, 2, 2))), Tensor(np.zeros((1, 2, 1, 1, 1))))


def test_conv3d_gradients_fd(rng):
    with check_precision():
        x = t64(rng.standard_normal((2, 2, 3, 4, 4)))
        w = t64(rng.standard_normal((3, 2, 3, 3, 2)))
        b = t64(rng.standard_normal(3))
        proj = rng.standard_normal((2, 3, 3, 2, 5))
        f = lambda: ops.sum(ops.mul(ops.conv3d(x, w, b, stride=(1, 2, 1), padding=1), proj))
        res = check_gradients(f, [x, w, b])
    assert max(r[-1] for r in res) < 1e-3


def test_backends_agree_bitwise(rng):
    x = rng.standard_normal((2, 3, 5, 6, 7)).astype(np.float32)
    args = (3, 2, 3, 2, 1, 2, 1, 0, 1)
    a = kernels.py_vol2col(x, *args)
    b = kernels.vol2col(x, *args)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(np.float32)
    assert np.array_equal(kernels.py_col2vol(cols, 3, 5, 6, 7, *args), kernels.col2vol(cols, 3, 5, 6, 7, *args))


def test_col2vol_is_adjoint_of_vol2col(rng):
    x = rng.standard_normal((1, 2, 4, 5, 5))
    args = (3, 3, 3, 2, 2, 1, 1, 1, 1)
    cols = kernels.vol2col(x, *args)
    y = rng.standard_normal(cols.shape)
    lhs = (cols * y).sum()
    rhs = (x * kernels.col2vol(y, 2, 4, 5, 5, *args)).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


# -- batchnorm ---------------------------------------------------------------------

def test_batchnorm_constant_input_returns_shift():
    x = Tensor(np.full((2, 3, 2, 2, 2), 4.0))
    shift = Tensor(np.array([0.5, -1.0, 2.0]))
    out = ops.batchnorm3d(x, Tensor(np.ones(3)), shift, "train", ops.RunningStats(3))
    np.testing.assert_allclose(out.data, np.broadcast_to(shift.data.reshape(1, 3, 1, 1, 1), x.shape))


def test_batchnorm_train_normalizes(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 4, 4)) * 3 + 5)
    out = ops.batchnorm3d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), "train", ops.RunningStats(2))
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3, 4)), 0, atol=1e-4)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3, 4)), 1, atol=1e-4)


def test_batchnorm_running_stats_momentum(rng):
    x = rng.standard_normal((2, 1, 2, 3, 3)) + 2
    rs = ops.RunningStats(1)
    with check_precision():
        ops.batchnorm3d(t64(x), t64(np.ones(1)), t64(np.zeros(1)), "train", rs)
    n = x.size
    assert rs.mean[0] == pytest.approx(0.1 * x.mean())
    assert rs.var[0] == pytest.approx(0.9 + 0.1 * x.var() * n / (n - 1))


def test_batchnorm_eval_requires_running_stats():
    with pytest.raises(ConfigurationError):
        ops.batchnorm3d(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), "eval",
                        ops.RunningStats(1))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients_fd(rng, mode):
    rs = ops.RunningStats(2)
    with check_precision():
        x = t64(rng.standard_normal((2, 2, 2, 3, 3)))
        scale = t64(rng.uniform(0.5, 1.5, 2))
        shift = t64(rng.standard_normal(2))
        proj = rng.standard_normal(x.shape)
        ops.batchnorm3d(x, scale, shift, "train", rs)
        f = lambda: ops.sum(ops.mul(ops.batchnorm3d(x, scale, shift, mode, rs), proj))
        res = check_gradients(f, [x, scale, shift])
    assert max(r[-1] for r in res) < 1e-3


# -- elementwise / reductions ------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor(np.full(7, 3.0))).data, np.full(7, 1 / 7), rtol=1e-6)


def test_global_avg_pool_mean():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2, 1, 1))
    assert ops.global_avg_pool(x).data.item() == 2.0


def test_axis_out_of_range():
    with pytest.raises(DimensionError):
        ops.softmax(Tensor(np.zeros((2, 3))), axes=2)
    with pytest.raises(DimensionError):
        ops.sum(Tensor(np.zeros(3)), axis=-2)


def test_log_softmax_consistent_with_softmax(rng):
    x = Tensor(rng.standard_normal((3, 5)))
    np.testing.assert_allclose(np.exp(ops.log_softmax(x).data), ops.softmax(x).data, rtol=1e-6)


def test_max_pool3d_values(rng):
    x = rng.standard_normal((1, 2, 4, 4, 4))
    out = ops.max_pool3d(Tensor(x), 2)
    ref = x.reshape(1, 2, 2, 2, 2, 2, 2, 2).max(axis=(3, 5, 7))
    np.testing.assert_allclose(out.data, ref.astype(np.float32))


OPS_FOR_FD = {
    "relu": lambda x: ops.relu(x),
    "add_broadcast": lambda x: ops.add(x, np.linspace(-1, 1, 4)),
    "mul": lambda x: ops.mul(x, x),
    "scalar_mul": lambda x: ops.scalar_mul(x, -2.5),
    "global_avg_pool": lambda x: ops.global_avg_pool(ops.reshape(x, (1, 3, 4, 1, 1))),
    "max_pool3d": lambda x: ops.max_pool3d(ops.reshape(x, (1, 1, 2, 2, 3)), (1, 2, 1)),
    "softmax_axes": lambda x: ops.softmax(ops.reshape(x, (1, 3, 4)), axes=(-2, -1)),
    "log_softmax": lambda x: ops.log_softmax(x, -1),
    "euclidean_norm": lambda x: ops.euclidean_norm(x, -1),
    "masked_select": lambda x: ops.masked_select(x, np.arange(12).reshape(3, 4) % 3 == 0),
    "pick": lambda x: ops.pick(x, [3, 0, 2]),
    "stack": lambda x: ops.stack([x, ops.scalar_mul(x, 2.0)], axis=1),
    "mean": lambda x: ops.mean(x, 0),
}


@pytest.mark.parametrize("name", sorted(OPS_FOR_FD))
def test_op_gradients_fd(name, rng):
    with check_precision():
        x = t64(rng.standard_normal((3, 4)) + 0.05)
        fn = OPS_FOR_FD[name]
        probe = fn(x)
        proj = rng.standard_normal(probe.shape)
        res = check_gradients(lambda: ops.sum(ops.mul(fn(x), proj)), [x])
    assert max(r[-1] for r in res) < 1e-3


def test_linear_gradients_fd(rng):
    with check_precision():
        x, w, b = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((4, 2))), t64(rng.standard_normal(2))
        proj = rng.standard_normal((3, 2))
        res = check_gradients(lambda: ops.sum(ops.mul(ops.linear(x, w, b), proj)), [x, w, b])
    assert max(r[-1] for r in res) < 1e-3


# -- backward semantics ------------------------------------------------------------

def test_backward_sum_of_scaled():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(ops.sum(ops.scalar_mul(x, 2.0)))
    np.testing.assert_array_equal(x.grad, 2)


def test_reuse_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(ops.sum(ops.add(x, x)))
    np.testing.assert_array_equal(x.grad, 2)


def test_repeated_backward_accumulates_until_zeroed():
    x = Tensor(np.ones(2), requires_grad=True)
    loss = ops.sum(ops.mul(x, x))
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, 4)
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, 0)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        backward(ops.relu(Tensor(np.ones(3), requires_grad=True)))


def test_frozen_leaf_grad_stays_zero(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    c = Tensor(rng.standard_normal(5))
    backward(ops.sum(ops.mul(x, c)))
    np.testing.assert_array_equal(c.grad, 0)
    assert c.grad.shape == c.shape


def test_linearity_of_accumulation(rng):
    x = Tensor(rng.standard_normal(6), requires_grad=True)
    a = lambda: ops.sum(ops.mul(x, x))
    b = lambda: ops.sum(ops.relu(ops.scalar_mul(x, 3.0)))
    backward(ops.add(a(), b()))
    joint = x.grad.copy()
    x.zero_grad()
    backward(a())
    backward(b())
    np.testing.assert_allclose(joint, x.grad, rtol=1e-6)


def test_graph_is_topological_and_visits_once():
    x = Tensor(np.ones(3), requires_grad=True)
    h = ops.relu(x)
    loss = ops.sum(ops.add(ops.mul(h, h), h))
    g = build_graph(loss)
    assert len(g.nodes) == len({id(n) for n in g.nodes}) == 4
    produced = set()
    for node, out in zip(g.nodes, g.tensors):
        for inp in node.inputs:
            assert inp.is_leaf or id(inp) in produced
        produced.add(id(out))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.relu(x)
    assert y.is_leaf and not y.requires_grad


def test_default_precision_is_float32_and_check_mode_float64():
    assert Tensor([1.0]).dtype == np.float32
    with check_precision():
        assert Tensor([1.0]).dtype == np.float64
