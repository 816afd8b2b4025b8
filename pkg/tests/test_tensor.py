import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import t64
from oracles import conv3d_direct, trilinear_cell
from vinet import functional as F
from vinet.gradcheck import check_op, grad_check, relative_error
from vinet.selfcheck import op_suite
from vinet.tensor import Tensor, get_default_dtype, no_grad, precision


# ----------------------------------------------------------------- autograd
def test_default_dtype_is_float32_and_precision_switches():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert get_default_dtype() == np.float32


def test_leaf_gradients_accumulate_across_graphs():
    x = t64([1.0, 2.0], grad=True)
    (x * x).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0 + 3.0, 4.0 + 3.0])


def test_second_backward_on_same_graph_raises():
    x = t64(2.0, grad=True)
    y = x * x
    y.backward()
    with pytest.raises(RuntimeError, match="twice"):
        y.backward()


def test_reused_node_sums_its_gradient_paths():
    x = t64(3.0, grad=True)
    y = x * 2.0
    z = y * y + y  # dz/dx = (2y + 1) * 2 = 26
    z.backward()
    assert x.grad == pytest.approx(26.0)


def test_broadcast_gradient_reduces_to_operand_shape():
    a = t64(np.ones((2, 3)), grad=True)
    b = t64(np.ones(3), grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


def test_non_scalar_backward_needs_explicit_gradient():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = t64([1.0], grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(RuntimeError):
        y.sum().backward()


def test_non_finite_results_are_rejected():
    with pytest.raises(FloatingPointError):
        Tensor([np.nan])
    x = t64([1e300])
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        x * 1e300


def test_log_of_non_positive_raises():
    with pytest.raises(ValueError):
        t64([0.0, 1.0]).log()


def test_ndarray_on_left_dispatches_to_tensor():
    out = np.ones(2) * t64([1.0, 2.0], grad=True)
    assert isinstance(out, Tensor)


# --------------------------------------------------------------- conv3d
@pytest.mark.parametrize("stride,padding", [((1, 1, 1), (1, 1, 1)), ((2, 1, 2), (0, 1, 0)),
                                            ((1, 2, 2), (1, 0, 1))])
def test_conv3d_matches_direct_summation(rng, stride, padding):
    x = rng.standard_normal((2, 5, 6, 5))
    w = rng.standard_normal((3, 2, 3, 2, 3))
    b = rng.standard_normal(3)
    with precision(np.float64):
        got = F.conv3d(t64(x), t64(w), t64(b), stride, padding).numpy()
    np.testing.assert_allclose(got, conv3d_direct(x, w, b, stride, padding), atol=1e-12)


def test_conv3d_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    with precision(np.float64):
        batched = F.conv3d(t64(x), t64(w), padding=1).numpy()
        single = [F.conv3d(t64(x[i]), t64(w), padding=1).numpy() for i in range(3)]
    np.testing.assert_allclose(batched, np.stack(single), atol=1e-12)


def test_conv3d_rejects_mismatched_channels_and_oversized_kernels(rng):
    with pytest.raises(ValueError):
        F.conv3d(t64(np.zeros((2, 4, 4, 4))), t64(np.zeros((1, 3, 1, 1, 1))))
    with pytest.raises(ValueError):
        F.conv3d(t64(np.zeros((1, 2, 2, 2))), t64(np.zeros((1, 1, 3, 3, 3))))


def test_sep_conv3d_is_spatial_then_temporal(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    ws = rng.standard_normal((3, 2, 1, 3, 3))
    wt = rng.standard_normal((3, 3, 3, 1, 1))
    with precision(np.float64):
        got = F.sep_conv3d(t64(x), t64(ws), t64(wt)).numpy()
    ref = conv3d_direct(conv3d_direct(x, ws, None, (1, 1, 1), (0, 1, 1)), wt, None,
                        (1, 1, 1), (1, 0, 0))
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_conv_transpose_with_kernel_equal_stride_scatters_blocks(rng):
    x = rng.standard_normal((2, 1, 2, 2))
    w = rng.standard_normal((2, 3, 1, 2, 2))
    with precision(np.float64):
        out = F.conv_transpose3d(t64(x), t64(w), stride=(1, 2, 2)).numpy()
    assert out.shape == (3, 1, 4, 4)
    for i in range(2):
        for j in range(2):
            block = np.einsum("c,cokl->okl", x[:, 0, i, j], w[:, :, 0])
            np.testing.assert_allclose(out[:, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2], block)


def test_maxpool3d_picks_window_maxima(rng):
    x = rng.standard_normal((2, 4, 6, 6))
    with precision(np.float64):
        out = F.maxpool3d(t64(x), (2, 3, 2)).numpy()
    ref = x.reshape(2, 2, 2, 2, 3, 3, 2).max(axis=(2, 4, 6))
    np.testing.assert_array_equal(out, ref)


def test_maxpool_gradient_goes_to_first_maximum_only():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    F.maxpool3d(x, (1, 2, 2)).sum().backward()
    np.testing.assert_array_equal(x.grad.reshape(-1), [1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------- upsample
@pytest.mark.parametrize("out_size", [(4, 6, 8), (3, 5, 7), (2, 2, 2), (1, 3, 9)])
def test_trilinear_matches_per_cell_oracle(rng, out_size):
    x = rng.standard_normal((2, 2, 3, 4))
    with precision(np.float64):
        got = F.trilinear_upsample(t64(x), out_size).numpy()
    np.testing.assert_allclose(got, trilinear_cell(x, out_size), atol=1e-12)


def test_trilinear_identity_and_constant_preservation(rng):
    x = rng.standard_normal((1, 3, 4, 5))
    with precision(np.float64):
        np.testing.assert_allclose(F.trilinear_upsample(t64(x), (3, 4, 5)).numpy(), x, atol=1e-15)
        c = F.trilinear_upsample(t64(np.full((2, 2, 3, 3), 1.5)), (4, 6, 6)).numpy()
    np.testing.assert_allclose(c, 1.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_doubling_preserves_block_means(t, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((1, t, h, w))
    with precision(np.float64):
        up = F.trilinear_upsample(t64(x), (2 * t, 2 * h, 2 * w)).numpy()
    np.testing.assert_allclose(up.mean(), x.mean(), atol=1e-12)
    back = up.reshape(1, t, 2, h, 2, w, 2).mean(axis=(2, 4, 6))
    np.testing.assert_allclose(back.mean(), x.mean(), atol=1e-12)


# ---------------------------------------------------------- misc functional
def test_concat_and_split_round_trip(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    with precision(np.float64):
        joined = F.concat([t64(a), t64(b)], axis=1)
        left, right = F.split(joined, [3, 4], axis=1)
    np.testing.assert_array_equal(left.numpy(), a)
    np.testing.assert_array_equal(right.numpy(), b)


def test_normalize_to_distribution_sums_to_one_and_rejects_bad_maps(rng):
    with precision(np.float64):
        out = F.normalize_to_distribution(t64(rng.random((3, 4, 5)) + 0.1)).numpy()
    np.testing.assert_allclose(out.sum(axis=(1, 2)), 1.0)
    with pytest.raises(ValueError):
        F.normalize_to_distribution(t64(np.zeros((2, 2))))
    with pytest.raises(ValueError):
        F.normalize_to_distribution(t64([[1.0, -1.0]]))


# ------------------------------------------------------------- grad checks
@pytest.mark.parametrize("seed", range(5))
def test_every_op_passes_finite_differences(seed):
    report = op_suite(seed)
    assert report.passed(1e-4), "\n".join(report.lines())


def test_relative_error_uses_a_floor_for_tiny_derivatives():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_grad_check_detects_a_wrong_backward():
    x = t64([0.3, 0.7], grad=True)

    def bad_square(t):
        out = Tensor._from_op(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square")
        return out.sum()

    with precision(np.float64):
        report = grad_check(lambda: bad_square(x), {"x": x})
    assert not report.passed(1e-4)


def test_kink_straddling_step_is_shrunk():
    # relu input at 1e-6: a 1e-5 step would cross zero
    report = check_op(lambda a: a.relu(), [np.array([1e-6, -0.5, 0.8])], weight_output=False)
    assert report.passed(1e-6)
    assert report.n_reduced_step["input0"] == 1
