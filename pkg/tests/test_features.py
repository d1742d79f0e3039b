import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import autograd_vs_fd

from fscd.features import (
    BackboneConfig,
    CenterOutsideMapError,
    ExemplarFeature,
    FeatureMap,
    ImageTooSmallError,
    aggregate,
    aggregate_maps,
    build_backbone,
    extract_exemplar_feature,
    extract_feature_map,
    pool_exemplars,
)
from fscd.geometry import Box


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    return build_backbone(BackboneConfig(kind="tiny", stride=8, feature_dim=64))


def test_tiny_shape(tiny):
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    assert extract_feature_map(img, tiny).shape == (8, 8, 64)


@pytest.mark.parametrize("hw,want", [((65, 70), (9, 9)), ((8, 17), (1, 3)), ((128, 96), (16, 12))])
def test_ceil_shape(tiny, hw, want):
    img = np.zeros((*hw, 3), np.uint8)
    assert extract_feature_map(img, tiny).shape[:2] == want


def test_too_small(tiny):
    with pytest.raises(ImageTooSmallError):
        extract_feature_map(np.zeros((7, 64, 3), np.uint8), tiny)


def test_deterministic(tiny):
    img = np.random.default_rng(1).integers(0, 256, (48, 40, 3), dtype=np.uint8)
    a = extract_feature_map(img, tiny).values
    b = extract_feature_map(img.copy(), tiny).values
    assert torch.equal(a, b)


def test_zero_image_bias_free():
    bb = build_backbone(BackboneConfig(kind="tiny", stride=8, feature_dim=64, bias=False))
    out = extract_feature_map(np.zeros((32, 32, 3), np.uint8), bb, normalize=False)
    assert torch.count_nonzero(out.values) == 0


def test_backbone_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(kind="tiny", stride=6)
    with pytest.raises(ValueError):
        BackboneConfig(kind="vgg")


# ---------------------------------------------------------------- exemplar pooling


def _map_2x2():
    return FeatureMap(torch.tensor([[[1.0], [2.0]], [[3.0], [4.0]]], dtype=torch.float64), stride=1)


def test_nearest_cell_average():
    boxes = [Box(0.25, 0.25, 0.1, 0.1), Box(0.75, 0.25, 0.1, 0.1), Box(0.75, 0.75, 0.1, 0.1)]
    f = extract_exemplar_feature(_map_2x2(), boxes, mode="nearest")
    assert f.values.item() == pytest.approx(7 / 3, abs=1e-12)
    # cell centers are exact bilinear sample points too
    assert extract_exemplar_feature(_map_2x2(), boxes).values.item() == pytest.approx(7 / 3, abs=1e-12)


def test_single_exemplar():
    fm = FeatureMap(torch.randn(5, 6, 8, dtype=torch.float64), stride=8)
    b = Box(0.3, 0.6, 0.1, 0.1)
    f = extract_exemplar_feature(fm, [b])
    f3 = extract_exemplar_feature(fm, [b, b, b])
    assert torch.allclose(f.values, f3.values, atol=1e-14)


def test_bilinear_midpoint():
    # halfway between cell centers (0,0) and (0,1) -> mean of 1 and 2
    f = extract_exemplar_feature(_map_2x2(), [Box(0.5, 0.25, 0.1, 0.1)])
    assert f.values.item() == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    g = torch.Generator().manual_seed(seed)
    fm = FeatureMap(torch.randn(6, 7, 4, generator=g, dtype=torch.float64), stride=8)
    centers = torch.rand(5, 2, generator=g, dtype=torch.float64).tolist()
    boxes = [Box(x, y, 0.05, 0.05) for x, y in centers]
    perm = torch.randperm(5, generator=g).tolist()
    a = extract_exemplar_feature(fm, boxes).values
    b = extract_exemplar_feature(fm, [boxes[i] for i in perm]).values
    assert torch.allclose(a, b, atol=1e-12)


def test_center_outside():
    with pytest.raises(CenterOutsideMapError):
        pool_exemplars(torch.zeros(1, 2, 3, 3), torch.tensor([[[1.2, 0.5]]]))


def test_mask_ignores_padding():
    fmap = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    centers = torch.tensor([[[0.2, 0.2], [0.7, 0.4], [0.5, 0.5]]], dtype=torch.float64)
    masked = pool_exemplars(fmap, centers, torch.tensor([[1, 1, 0]]))
    assert torch.allclose(masked, pool_exemplars(fmap, centers[:, :2]))


# ---------------------------------------------------------------- aggregation


def test_aggregate_hand_example():
    fm = FeatureMap(torch.tensor([[[2.0]]], dtype=torch.float64), 1)
    out = aggregate(fm, ExemplarFeature(torch.tensor([3.0], dtype=torch.float64)), torch.tensor([[1.0], [1.0]]))
    assert out.values.item() == 8.0


def test_aggregate_identity_projection():
    fm = FeatureMap(torch.randn(3, 4, 5, dtype=torch.float64), 8)
    w = torch.cat([torch.eye(5), torch.zeros(5, 5)]).double()
    out = aggregate(fm, ExemplarFeature(torch.randn(5, dtype=torch.float64)), w)
    assert torch.equal(out.values, fm.values)


def test_aggregate_zero_exemplar():
    fm = FeatureMap(torch.randn(3, 4, 5, dtype=torch.float64), 8)
    w = torch.randn(10, 5, dtype=torch.float64)
    out = aggregate(fm, ExemplarFeature(torch.zeros(5, dtype=torch.float64)), w)
    assert torch.allclose(out.values, fm.values @ w[:5], atol=1e-12)


def test_aggregate_dimension_mismatch():
    fm = FeatureMap(torch.randn(3, 4, 5), 8)
    with pytest.raises(ValueError):
        aggregate(fm, ExemplarFeature(torch.randn(5)), torch.randn(5, 5))


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 10_000))
def test_aggregate_linear_in_features(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64)
    fb = torch.randn(1, 4, generator=g, dtype=torch.float64)
    w = torch.randn(8, 4, generator=g, dtype=torch.float64)
    lhs = aggregate_maps(alpha * f, fb, w)
    rhs = alpha * aggregate_maps(f, fb, w)
    assert torch.allclose(lhs, rhs, atol=1e-10 * (1 + abs(alpha)))


def test_aggregate_gradients_small_sample():
    g = torch.Generator().manual_seed(0)
    for _ in range(5):
        f = torch.randn(1, 3, 2, 2, generator=g)
        fb = torch.randn(1, 3, generator=g)
        w = torch.randn(6, 3, generator=g)
        err = autograd_vs_fd(lambda a, b, c: aggregate_maps(a, b, c).pow(2).sum(), [f, fb, w])
        assert err < 1e-3
