import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmbt import tensor as T
from mmbt.errors import DimensionError
from mmbt.gradcheck import check_gradients


def t(data, grad=True):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# -- forward examples ------------------------------------------------------

def test_matmul_identity():
    a = t(np.eye(2))
    b = t([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_zeros_annihilate():
    z = t(np.zeros((2, 3)))
    b = t(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(T.matmul(z, b).data, np.zeros((2, 4)))


def test_matmul_hand_case():
    out = T.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 5))))


def test_softmax_uniform():
    out = T.softmax_rows(t([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logit_no_overflow():
    out = T.softmax_rows(t([1000.0, 0.0]))
    assert np.isfinite(out.data).all()
    assert abs(out.data[0] - 1.0) < 1e-12
    assert abs(out.data[1]) < 1e-12


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    expect = np.exp(x) / np.exp(x).sum()
    assert np.allclose(T.softmax_rows(t(x)).data, expect, atol=1e-15)


def test_layer_norm_constant_row():
    out = T.layer_norm(t([[4.0, 4.0, 4.0]]), t(np.ones(3)), t(np.zeros(3)))
    assert np.allclose(out.data, 0.0, atol=1e-3)  # eps-guarded zero variance


def test_layer_norm_two_point_row():
    out = T.layer_norm(t([[1.0, -1.0]]), t(np.ones(2)), t(np.zeros(2)))
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_affine_dominates():
    out = T.layer_norm(t([[3.0, 1.0]]), t(np.zeros(2)), t(np.full(2, 5.0)))
    assert np.array_equal(out.data, [[5.0, 5.0]])


def test_conv2d_full_cover_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 16, 16))
    w = rng.normal(size=(1, 1, 16, 16))
    out = T.conv2d(t(x), t(w), t(np.zeros(1)), (16, 16), [(0, 0), (0, 0)])
    assert out.shape == (1, 1, 1)
    assert abs(out.data.reshape(()) - (x * w[0]).sum()) < 1e-12


def test_conv2d_delta_kernel_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 7))
    w = np.zeros((1, 1, 1, 1))
    w[0, 0, 0, 0] = 1.0
    out = T.conv2d(t(x), t(w), t(np.zeros(1)), (1, 1), [(0, 0), (0, 0)])
    assert np.array_equal(out.data, x)


def test_pool_grid_shapes():
    x = t(np.random.default_rng(2).normal(size=(32 * 256, 4)))
    assert T.pool_grid(x, (32, 256), (2, 2), "max").shape == (16 * 128, 4)
    x2 = t(np.random.default_rng(3).normal(size=(8 * 64, 4)))
    assert T.pool_grid(x2, (8, 64), (1, 2), "max").shape == (8 * 32, 4)


def test_pool_grid_identity_stride():
    x = t(np.random.default_rng(4).normal(size=(12, 3)))
    assert np.array_equal(T.pool_grid(x, (3, 4), (1, 1), "avg").data, x.data)


def test_pool_grid_avg_preserves_grand_mean():
    x = np.random.default_rng(5).normal(size=(4 * 6, 2))
    out = T.pool_grid(t(x), (4, 6), (2, 3), "avg")
    assert abs(out.data.mean() - x.mean()) < 1e-15


def test_pool_grid_avg_region_values():
    x = np.arange(8.0).reshape(8, 1)
    out = T.pool_grid(t(x), (8,), (2,), "avg")
    assert np.array_equal(out.data, [[0.5], [2.5], [4.5], [6.5]])


def test_pool_grid_nondivisible_stride_rejected():
    with pytest.raises(DimensionError):
        T.pool_grid(t(np.zeros((6, 2))), (6,), (4,), "max")


def test_backward_requires_scalar():
    x = t(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        T.add(x, x).backward()


def test_backward_sum_gives_ones():
    x = t(np.random.default_rng(6).normal(size=(3, 4)))
    T.sum_all(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = t(np.random.default_rng(7).normal(size=(5,)))
    T.sum_all(T.mul(x, x)).backward()
    assert np.allclose(x.grad, 2 * x.data, atol=1e-15)


def test_gather_cols():
    x = t([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out = T.gather_cols(x, np.array([[2, 0], [1, 1]]))
    assert np.array_equal(out.data, [[3.0, 1.0], [5.0, 5.0]])
    T.sum_all(out).backward()
    assert np.array_equal(x.grad, [[1.0, 0.0, 1.0], [0.0, 2.0, 0.0]])


def test_cross_entropy_uniform_logits():
    logits = t(np.zeros((4, 7)))
    out = T.cross_entropy(logits, [0, 1, 2, 3])
    assert abs(out.item() - np.log(7)) < 1e-12


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        T.cross_entropy(t(np.zeros((2, 3))), [0, 3])


def test_tape_topological_and_unique():
    x = t(np.ones((2, 2)))
    y = T.add(x, x)
    z = T.mul(y, y)
    loss = T.sum_all(T.add(z, y))
    tape = T.build_tape(loss)
    ids = [id(n) for n in tape]
    assert len(ids) == len(set(ids))
    pos = {i: k for k, i in enumerate(ids)}
    for node in tape:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_detach_blocks_gradient():
    x = t(np.ones(3))
    loss = T.sum_all(T.mul(x.detach(), x.detach()))
    assert not loss.requires_grad


def test_no_grad_mode():
    x = t(np.ones(3))
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._grad_fn is None


def test_determinism_same_seed_bitwise():
    def run():
        rng = np.random.default_rng(42)
        a = t(rng.normal(size=(6, 6)))
        b = t(rng.normal(size=(6, 6)))
        loss = T.sum_all(T.gelu(T.matmul(a, b)))
        loss.backward()
        return loss.item(), a.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


# -- property tests --------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(row):
    out = T.softmax_rows(t(row)).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert ((out >= 0) & (out <= 1)).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_pool_avg_mean_invariant(sf, sn, seed):
    rng = np.random.default_rng(seed)
    grid = (3 * sf, 2 * sn)
    x = rng.normal(size=(grid[0] * grid[1], 3))
    out = T.pool_grid(t(x), grid, (sf, sn), "avg")
    assert np.allclose(out.data.mean(axis=0), x.mean(axis=0), atol=1e-12)


# -- gradient checks -------------------------------------------------------

def _check(make_loss, leaves, seed):
    report = check_gradients(make_loss, leaves, rng=np.random.default_rng(seed))
    assert report.passed, report.failures[:3]
    return report.max_rel_err


@pytest.mark.parametrize("seed", range(5))
def test_grad_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = t(rng.normal(size=(3, 4))), t(rng.normal(size=(4, 2)))
    _check(lambda: T.sum_all(T.gelu(T.matmul(a, b))), {"a": a, "b": b}, seed)


@pytest.mark.parametrize("seed", range(5))
def test_grad_softmax_and_log_softmax(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    _check(lambda: T.weighted_sum(T.softmax_rows(x), w), {"x": x}, seed)
    _check(lambda: T.weighted_sum(T.log_softmax_rows(x), w), {"x": x}, seed)


@pytest.mark.parametrize("seed", range(5))
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(4, 6)))
    gain = t(rng.normal(size=6))
    bias = t(rng.normal(size=6))
    w = rng.normal(size=(4, 6))
    _check(
        lambda: T.weighted_sum(T.layer_norm(x, gain, bias), w),
        {"x": x, "gain": gain, "bias": bias},
        seed,
    )


@pytest.mark.parametrize("seed", range(5))
def test_grad_conv2d(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(2, 6, 7)))
    w = t(rng.normal(size=(3, 2, 3, 3)))
    b = t(rng.normal(size=3))
    ww = rng.normal(size=(3, 3, 4))
    _check(
        lambda: T.weighted_sum(T.conv2d(x, w, b, (2, 2), [(1, 0), (1, 1)]), ww),
        {"x": x, "w": w, "b": b},
        seed,
    )


@pytest.mark.parametrize("seed", range(5))
def test_grad_conv3d(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(2, 4, 5, 5)))
    w = t(rng.normal(size=(2, 2, 2, 3, 3)))
    b = t(rng.normal(size=2))
    ww = rng.normal(size=(2, 2, 3, 3))
    _check(
        lambda: T.weighted_sum(T.conv3d(x, w, b, (2, 2, 2), [(0, 0), (1, 1), (1, 1)]), ww),
        {"x": x, "w": w, "b": b},
        seed,
    )


@pytest.mark.parametrize("mode", ["max", "avg"])
@pytest.mark.parametrize("seed", range(5))
def test_grad_pool(mode, seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(4 * 6, 3)))
    w = rng.normal(size=(2 * 3, 3))
    _check(lambda: T.weighted_sum(T.pool_grid(x, (4, 6), (2, 2), mode), w), {"x": x}, seed)


@pytest.mark.parametrize("seed", range(5))
def test_grad_structural_ops(seed):
    rng = np.random.default_rng(seed)
    a = t(rng.normal(size=(2, 4)))
    b = t(rng.normal(size=(3, 4)))
    idx = rng.integers(0, 4, size=(5, 6))
    w = rng.normal(size=(5, 6))

    def loss():
        cat = T.concat_rows([a, b])
        top, bottom = T.split_rows(cat, [1, 4])
        rejoined = T.concat_rows([T.scale(top, 2.0), bottom])
        gathered = T.gather_cols(rejoined, idx)
        return T.weighted_sum(gathered, w)

    _check(loss, {"a": a, "b": b}, seed)


@pytest.mark.parametrize("seed", range(5))
def test_grad_normalize_bias_block(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.normal(size=(4, 3)))
    bias = t(rng.normal(size=3))
    blk = t(rng.normal(size=(2, 2)))
    w = rng.normal(size=(4, 3))

    def loss():
        y = T.add_bias(x, bias)
        y = T.add_block(y, blk, 1, 1)
        return T.weighted_sum(T.l2_normalize_rows(y), w)

    _check(loss, {"x": x, "bias": bias, "blk": blk}, seed)


@pytest.mark.parametrize("seed", range(5))
def test_grad_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = t(rng.normal(size=(3, 5)))
    labels = rng.integers(0, 5, size=3)
    _check(lambda: T.cross_entropy(logits, labels), {"logits": logits}, seed)


def test_first_nonfinite_names_earliest():
    x = t(np.array([1.0, 2.0]))
    y = T.scale(x, np.inf)
    z = T.sum_all(y)
    assert T.first_nonfinite(z) == "scale"
