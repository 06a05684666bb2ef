import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unifyedit import (
    AttentionMap,
    BinaryMask,
    FlattenedMask,
    ca_alignment,
    ca_ratio,
    mask_outer,
    region_sa_preservation,
    resample_mask,
    sa_preservation,
)
from unifyedit.constraints import mean_ratio
from unifyedit.errors import DegenerateMaskError, ShapeError, ValidationError


def ca_with_ratio(r, n=4, tokens=2, col=1):
    """CA map whose column ``col`` has inside mean ``0.1 r`` and outside mean 0.1 (mask = first half)."""
    ca = np.full((n, tokens), 0.5)
    ca[: n // 2, col] = 0.1 * r
    ca[n // 2:, col] = 0.1
    return ca


HALF4 = FlattenedMask(np.array([1, 1, 0, 0]), 2)


def test_mask_outer_example():
    np.testing.assert_array_equal(mask_outer([1, 0]).matrix, [[1, 0], [0, 0]])


def test_mask_outer_rejects_non_binary():
    with pytest.raises(ValidationError):
        mask_outer([0.5, 1])


def test_flattened_mask_length():
    with pytest.raises(ShapeError):
        FlattenedMask(np.ones(5), 2)
    assert FlattenedMask.from_mask(BinaryMask.full(8), 4).vector.shape == (16,)


def test_sa_preservation_examples():
    src = [np.eye(2)]
    assert sa_preservation(src, [np.full((2, 2), 0.5)]) == pytest.approx(1.0, abs=1e-15)
    assert sa_preservation([np.zeros((2, 2))], [np.full((2, 2), 0.1)]) == pytest.approx(0.04, abs=1e-15)
    assert sa_preservation(src, src) == 0.0


def test_sa_preservation_sums_layers():
    a = [np.zeros((2, 2)), np.zeros((2, 2))]
    b = [np.full((2, 2), 0.5), np.full((2, 2), 0.5)]
    assert sa_preservation(a, b) == pytest.approx(2.0)


def test_sa_preservation_layer_mismatch():
    with pytest.raises(ValidationError):
        sa_preservation([np.eye(2)], [np.eye(2), np.eye(2)])
    with pytest.raises(ValidationError):
        sa_preservation([np.eye(2)], [np.eye(3)])


def test_sa_preservation_pairs_by_layer_id():
    a = [AttentionMap(0, 2, np.zeros((4, 4))), AttentionMap(1, 2, np.ones((4, 4)))]
    b = [AttentionMap(1, 2, np.ones((4, 4))), AttentionMap(0, 2, np.zeros((4, 4)))]
    assert sa_preservation(a, b) == 0.0


def test_region_sap_example():
    loss = region_sa_preservation([np.eye(2)], [np.full((2, 2), 0.5)], mask_outer([1, 0]))
    assert loss == pytest.approx(0.25, abs=1e-15)


def test_region_sap_full_mask_is_global_bitwise():
    rng = np.random.default_rng(0)
    src = [rng.random((16, 16)) for _ in range(3)]
    tgt = [rng.random((16, 16)) for _ in range(3)]
    full = mask_outer(np.ones(16))
    assert region_sa_preservation(src, tgt, full) == sa_preservation(src, tgt)


def test_region_sap_mask_resolution_lookup():
    m_hat = {2: mask_outer(np.ones(4))}
    assert region_sa_preservation([np.eye(4)], [np.zeros((4, 4))], m_hat) == pytest.approx(4.0)
    with pytest.raises(ShapeError):
        region_sa_preservation([np.eye(9)], [np.zeros((9, 9))], m_hat)
    with pytest.raises(ShapeError):
        region_sa_preservation([np.eye(4)], [np.zeros((4, 4))], mask_outer(np.ones(9)))


def test_losses_keep_autograd():
    a = torch.zeros((2, 2), dtype=torch.float64, requires_grad=True)
    loss = sa_preservation([np.eye(2)], [a])
    assert isinstance(loss, torch.Tensor) and loss.requires_grad
    (g,) = torch.autograd.grad(loss, a)
    np.testing.assert_allclose(g.numpy(), -2 * np.eye(2))


def test_ca_ratio_example():
    ca = np.array([[0.0, 0.4], [0.0, 0.6], [0.0, 0.1], [0.0, 0.1]])
    assert ca_ratio(ca, 1, HALF4) == pytest.approx(5.0, rel=1e-14)


def test_ca_ratio_full_mask_is_inside_mean():
    ca = np.array([[0.2], [0.4]])
    assert ca_ratio(ca, 0, np.ones(2)) == pytest.approx(0.3, rel=1e-14)


def test_ca_ratio_uniform_column_is_one():
    assert ca_ratio(np.full((4, 3), 0.25), 2, HALF4) == 1.0


def test_ca_ratio_empty_mask():
    with pytest.raises(DegenerateMaskError):
        ca_ratio(np.ones((4, 2)), 0, np.zeros(4))


def test_ca_ratio_token_range():
    with pytest.raises(ValidationError):
        ca_ratio(np.ones((4, 2)), 2, HALF4)


def test_ca_ratio_multi_token_uses_mean_column():
    ca = np.array([[0.4, 0.2], [0.4, 0.2], [0.1, 0.1], [0.1, 0.1]])
    assert ca_ratio(ca, [0, 1], HALF4) == pytest.approx(3.0)


def test_ca_alignment_examples():
    layers = [ca_with_ratio(4.0) for _ in range(5)]
    assert ca_alignment(layers, [1], HALF4) == pytest.approx(-100.0, rel=1e-14)
    uniform = [np.full((4, 2), 0.5) for _ in range(5)]
    assert ca_alignment(uniform, [1], HALF4) == -25.0


def test_ca_alignment_multi_token_mean():
    # token 0 has R=1 (loss -25), token 1 has R=4 (loss -100)
    layers = [ca_with_ratio(4.0) for _ in range(5)]
    assert ca_alignment(layers, [0, 1], HALF4) == pytest.approx(-62.5, rel=1e-14)


def test_ca_alignment_zero_ratio_is_finite():
    ca = np.zeros((4, 2))
    ca[2:, 0] = 0.3
    a = torch.tensor(ca, requires_grad=True)
    loss = ca_alignment([a], [0], HALF4)
    (g,) = torch.autograd.grad(loss, a)
    assert torch.isfinite(loss) and torch.all(torch.isfinite(g))


def test_ca_alignment_needs_layers_and_tokens():
    with pytest.raises(ValidationError):
        ca_alignment([], [0], HALF4)
    with pytest.raises(ValidationError):
        ca_alignment([np.ones((4, 2))], [], HALF4)


def test_mean_ratio():
    layers = [ca_with_ratio(2.0), ca_with_ratio(4.0)]
    assert mean_ratio(layers, [1], HALF4) == pytest.approx(3.0)


def test_resample_mask():
    m = np.zeros((4, 4))
    m[:2, :2] = 1
    assert resample_mask(BinaryMask(m), 2).values.tolist() == [[1, 0], [0, 0]]
    up = resample_mask(BinaryMask(np.array([[1.0, 0.0]])), (2, 4))
    assert up.values.tolist() == [[1, 1, 0, 0], [1, 1, 0, 0]]
    # a single cell of 3x3 averages to 1/9 < 0.5
    one = np.zeros((3, 3))
    one[0, 0] = 1
    assert resample_mask(BinaryMask(one), 1).is_empty
    assert resample_mask(BinaryMask(np.ones((5, 5))), 2).is_full


def test_binary_mask_validation(tmp_path):
    with pytest.raises(ValidationError):
        BinaryMask(np.array([[0.5]]))
    with pytest.raises(ValidationError):
        BinaryMask(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        BinaryMask(np.ones(3))
    m = BinaryMask(np.eye(3))
    m.to_image(tmp_path / "m.png")
    assert np.array_equal(BinaryMask.from_image(tmp_path / "m.png").values, m.values)


maps = st.integers(0, 2 ** 20).map(lambda s: np.random.default_rng(s).random((2, 9, 9)))


@settings(max_examples=60, deadline=None)
@given(ab=maps)
def test_sap_symmetric_nonnegative(ab):
    a, b = [ab[0]], [ab[1]]
    assert sa_preservation(a, b) == sa_preservation(b, a)
    assert sa_preservation(a, b) > 0
    assert sa_preservation(a, a) == 0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_region_sap_monotone_under_mask_shrink(seed):
    rng = np.random.default_rng(seed)
    a, b = [rng.random((9, 9))], [rng.random((9, 9))]
    big = (rng.random(9) > 0.3).astype(float)
    small = big * (rng.random(9) > 0.5)
    assert region_sa_preservation(a, b, mask_outer(small)) <= region_sa_preservation(a, b, mask_outer(big))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 20), c=st.floats(1e-3, 1e3))
def test_ca_ratio_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    ca = rng.random((4, 3)) + 0.01
    scaled = ca.copy()
    scaled[:, 1] *= c
    assert ca_ratio(scaled, 1, HALF4) == pytest.approx(ca_ratio(ca, 1, HALF4), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(rs=st.lists(st.floats(0.05, 20), min_size=1, max_size=6), layer=st.integers(0, 5), bump=st.floats(0.01, 5))
def test_ca_alignment_decreases_with_ratio(rs, layer, bump):
    layer %= len(rs)
    before = ca_alignment([ca_with_ratio(r) for r in rs], [1], HALF4)
    rs2 = list(rs)
    rs2[layer] += bump
    after = ca_alignment([ca_with_ratio(r) for r in rs2], [1], HALF4)
    assert after < before
