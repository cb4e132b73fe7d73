"""
Tests for the reverse-mode tape: primitive values, adjoints against central
differences and the error surface.
"""
import numpy as np
import pytest

from chyvae import autodiff as ad
from chyvae.distributions import RngStream
from chyvae.errors import DimensionMismatch, DomainError, NotScalar

GRAD_TOL = 1e-6


def _check_gradients(build, *arrays):
    """Compare tape gradients of build(*tensors) with central differences."""
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*leaves)
    grads = tape.backward(loss)

    def value(points):
        return build(*(ad.constant(p) for p in points)).item()

    expected = ad.numeric_gradient(value, arrays)
    for leaf, fd in zip(leaves, expected):
        np.testing.assert_allclose(grads[leaf], fd, atol=GRAD_TOL, rtol=1e-5)


# =============================================================================
# Forward values
# =============================================================================

def test_softplus_at_zero():
    """Test softplus(0) = log 2."""
    assert ad.softplus(ad.constant([0.0])).values[0] == pytest.approx(np.log(2.0))


def test_softplus_is_stable_for_large_inputs():
    """Test softplus(x) ≈ x for large x and ≈ 0 for very negative x."""
    out = ad.softplus(ad.constant([800.0, -800.0])).values
    assert out[0] == pytest.approx(800.0)
    assert out[1] == pytest.approx(0.0, abs=1e-300)


def test_relu_clamps_negatives():
    """Test relu on mixed signs."""
    np.testing.assert_array_equal(ad.relu(ad.constant([-1.0, 0.0, 2.0])).values, [0.0, 0.0, 2.0])


def test_lower_triangular_assemble():
    """Test that the upper triangle is dropped and the diagonal softplus-ed."""
    out = ad.lower_triangular_assemble(ad.constant([0.0, 5.0, 2.0, 0.0])).values
    np.testing.assert_allclose(out, [[np.log(2.0), 0.0], [2.0, np.log(2.0)]])


# =============================================================================
# Backward examples
# =============================================================================

def test_backward_sum_of_squares():
    """Test d/dx Σx² = 2x."""
    x = ad.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x * x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x], [2.0, -4.0, 6.0])


def test_backward_matmul_example():
    """Test the gradient of Σ(A·B) with respect to both factors."""
    a = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = ad.Tensor(np.ones((3, 2)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(a @ b)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[a], np.full((2, 3), 2.0))
    np.testing.assert_array_equal(grads[b], np.tile(a.values.sum(axis=0)[:, None], (1, 2)))


def test_backward_accumulates_reused_tensor():
    """Test that a tensor used twice receives both contributions."""
    x = ad.Tensor([2.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x * x + x)
    assert tape.backward(loss)[x][0] == pytest.approx(5.0)


def test_backward_rejects_non_scalar():
    """Test that a vector loss raises NotScalar."""
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(NotScalar):
        tape.backward(y)


def test_constants_are_not_recorded():
    """Test that operations on constants leave the tape empty."""
    with ad.Tape() as tape:
        ad.sum(ad.constant([1.0, 2.0]) * 3.0)
    assert tape.nodes == []


def test_unused_leaf_gets_zero_gradient():
    """Test that grad_or_zeros fills in for a leaf the loss ignores."""
    x = ad.Tensor([1.0], requires_grad=True)
    y = ad.Tensor([4.0, 5.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x * 3.0)
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad_or_zeros(), [0.0, 0.0])


def test_zero_grad_resets_accumulation():
    """Test that zero_grad clears every gradient so a second backward matches the first."""
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(x * 3.0)
    tape.backward(loss)
    tape.zero_grad()
    assert x.grad is None and loss.grad is None
    np.testing.assert_array_equal(tape.backward(loss)[x], [3.0, 3.0])


# =============================================================================
# Gradients against finite differences
# =============================================================================

@pytest.fixture
def arrays():
    rng = RngStream(42)
    return rng.normal((3, 4)), rng.normal((4, 2)), rng.normal(4)


def test_gradient_matmul_chain(arrays):
    """Test a two-layer product through softplus and sigmoid."""
    a, b, _ = arrays
    _check_gradients(lambda x, w: ad.sum(ad.sigmoid(ad.softplus(x @ w))), a, b)


def test_gradient_matvec_and_dot(arrays):
    """Test matvec followed by a dot product."""
    a, _, v = arrays
    _check_gradients(lambda m, x: ad.dot(ad.matvec(m, x), ad.matvec(m, x)), a, v)


def test_gradient_outer_transpose_diagonal(arrays):
    """Test the outer product, transpose and diagonal extraction."""
    _, _, v = arrays
    _check_gradients(lambda x: ad.sum(ad.diagonal(ad.transpose(ad.outer(x, x)) * 2.0)) + ad.sum(ad.exp(x)), v)


def test_gradient_log_exp_scalar_mul(arrays):
    """Test log of a positive expression scaled by a tensor scalar."""
    _, _, v = arrays
    s = np.array([0.7])
    _check_gradients(lambda x, k: ad.sum(ad.scalar_mul(ad.log(ad.exp(x) + ad.exp(x)), k)), v, s)


def test_gradient_reductions_and_reshape(arrays):
    """Test axis sums, reshape, repeat_rows, slice and concat."""
    a, _, v = arrays

    def build(x, y):
        tiled = ad.repeat_rows(y, 3) * x
        flat = ad.reshape(tiled, (12,))
        joined = ad.concat([ad.slice(flat, np.s_[2:7]), ad.sum(tiled, axis=1)], axis=0)
        return ad.sum(ad.sigmoid(joined))

    _check_gradients(build, a, v)


def test_gradient_lower_triangular_assemble():
    """Test the assembled factor feeds gradients only through kept entries."""
    rng = RngStream(3)
    raw = rng.normal((2, 9))
    _check_gradients(lambda h: ad.sum(ad.matmul(ad.lower_triangular_assemble(h), ad.constant(np.ones((2, 3, 3))))), raw)


def test_gradient_batched_matmul():
    """Test the batched (B, n, k)·(B, k, m) product."""
    rng = RngStream(4)
    _check_gradients(lambda x, y: ad.sum(ad.softplus(x @ y)), rng.normal((2, 3, 3)), rng.normal((2, 3, 2)))


def test_relu_subgradient_at_zero():
    """Test that relu passes no gradient at exactly 0."""
    x = ad.Tensor([0.0, 1.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.relu(x))
    np.testing.assert_array_equal(tape.backward(loss)[x], [0.0, 1.0])


# =============================================================================
# Errors
# =============================================================================

def test_shape_mismatch_raises():
    """Test that element-wise ops and matmul refuse mismatched shapes."""
    with pytest.raises(DimensionMismatch):
        ad.add(ad.constant([1.0, 2.0]), ad.constant([1.0]))
    with pytest.raises(DimensionMismatch):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_log_domain():
    """Test that log of a non-positive value is a domain error."""
    with pytest.raises(DomainError):
        ad.log(ad.constant([1.0, 0.0]))


def test_item_requires_single_element():
    """Test that item() on a vector raises NotScalar."""
    with pytest.raises(NotScalar):
        ad.constant([1.0, 2.0]).item()
