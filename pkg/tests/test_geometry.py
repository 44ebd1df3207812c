import logging

import numpy as np
import pytest

from golden_rpg.errors import LayoutError
from golden_rpg.geometry import (RegionLayout, band_for_width, boundary_bands, boundary_edges, build_masks,
                                 downsample_mask, downsample_masks, even_layout, masks_from_ratios,
                                 normalize_ratios, region_index_map, sigma_for_width, soften_masks, split_axis)


def test_two_even_regions():
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 4, 4))
    np.testing.assert_array_equal(hard[0], np.repeat([[1, 1, 0, 0]], 4, axis=0))
    np.testing.assert_array_equal(hard[1], np.repeat([[0, 0, 1, 1]], 4, axis=0))


def test_boundary_rounding():
    edges = boundary_edges(RegionLayout((0.2, 0.3, 0.5), 1, 10))
    np.testing.assert_array_equal(edges, [0, 2, 5, 10])


def test_vertical_split_uses_rows():
    hard = masks_from_ratios(RegionLayout((0.25, 0.75), 4, 2, axis="vertical"))
    np.testing.assert_array_equal(hard[0], [[1, 1], [0, 0], [0, 0], [0, 0]])


@pytest.mark.parametrize("axis", ["horizontal", "vertical"])
def test_split_axis_is_recovered_from_the_masks(axis):
    rng = np.random.default_rng(8)
    for count in (2, 3, 4):
        layout = RegionLayout(normalize_ratios(1.0 + rng.random(count)), 12, 20, axis)
        assert split_axis(masks_from_ratios(layout)) == axis
    assert split_axis(np.ones((1, 6, 6))) == "horizontal"


def test_random_layouts_partition_the_canvas():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        count = int(rng.integers(1, 9))
        ratios = normalize_ratios(rng.dirichlet(np.ones(count)), 0.1)
        masks = build_masks(RegionLayout(ratios, 16, 32), float(rng.uniform(0.0, 4.0)))
        assert np.all(masks.hard.sum(axis=0) == 1.0)
        assert np.all(masks.soft >= 0.0)
        assert np.max(np.abs(masks.soft.sum(axis=0) - 1.0)) <= 1e-6
        assert set(np.unique(masks.index_map)) == set(range(1, count + 1))


def test_zero_sigma_soft_equals_hard():
    hard = masks_from_ratios(RegionLayout((0.3, 0.7), 8, 8))
    np.testing.assert_array_equal(soften_masks(hard, 0.0), hard)


def test_soft_masks_fall_off_across_the_boundary():
    soft = build_masks(RegionLayout((0.5, 0.5), 1, 32), 2.0).soft
    left = soft[0, 0]
    assert np.all(np.diff(left) <= 1e-12)
    assert left[15] > 0.5 > left[16]
    assert left[0] == pytest.approx(1.0, abs=1e-6)


def test_index_map():
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 4, 4))
    np.testing.assert_array_equal(region_index_map(hard), np.repeat([[1, 1, 2, 2]], 4, axis=0))


def test_index_map_rejects_overlap_and_holes():
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 2, 2))
    with pytest.raises(LayoutError):
        region_index_map(np.stack([hard[0], hard[0]]))
    with pytest.raises(LayoutError):
        region_index_map(np.stack([hard[0], hard[0] * 0.5]))


def test_downsample_constant_mask():
    np.testing.assert_allclose(downsample_mask(np.ones((128, 128)), 14, 14), np.ones((14, 14)), atol=1e-12)


def test_downsample_single_pixel():
    mask = np.zeros((4, 4))
    mask[0, 0] = 1.0
    pooled = downsample_mask(mask, 2, 2)
    assert pooled[0, 0] == pytest.approx(0.25)
    assert pooled.sum() == pytest.approx(0.25)


def test_downsampled_halves_stay_a_partition():
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 128, 128))
    pooled = downsample_masks(hard, 14, 14)
    np.testing.assert_allclose(pooled.sum(axis=0), np.ones((14, 14)), atol=1e-12)
    np.testing.assert_allclose(pooled.sum(axis=(0, 2)), np.full(14, 14.0), atol=1e-9)


def test_bands_at_128():
    hard = masks_from_ratios(RegionLayout((0.5, 0.5), 128, 128))
    (pair,) = boundary_bands(hard, 32)
    assert pair.boundary == 64
    assert pair.left_span == (32, 64) and pair.right_span == (64, 96)
    assert pair.left.sum() == 32 * 128 and not (pair.left & pair.right).any()


def test_bands_for_three_regions():
    hard = masks_from_ratios(RegionLayout((0.2, 0.3, 0.5), 1, 10))
    first, second = boundary_bands(hard, 2)
    assert (first.left_span, first.right_span) == ((0, 2), (2, 4))
    assert (second.left_span, second.right_span) == ((3, 5), (5, 7))
    assert not first.clipped and not second.clipped


def test_single_region_has_no_bands():
    assert boundary_bands(masks_from_ratios(RegionLayout((1.0,), 4, 4)), 2) == []


def test_wide_bands_are_clipped_with_a_warning(caplog):
    hard = masks_from_ratios(RegionLayout((0.2, 0.3, 0.5), 1, 10))
    with caplog.at_level(logging.WARNING, logger="golden_rpg.geometry"):
        first, _ = boundary_bands(hard, 3)
    assert first.clipped and first.left_span == (0, 2)
    assert "clipped" in caplog.text


@pytest.mark.parametrize("width, band", [(1024, 32), (128, 4), (32, 1), (16, 1)])
def test_band_scaling(width, band):
    assert band_for_width(width) == band


def test_sigma_scaling():
    assert sigma_for_width(128) == 4.0
    assert sigma_for_width(32) == 1.0


@pytest.mark.parametrize("ratios", [(0.5, 0.6), (0.0, 1.0), (1.5, -0.5), ()])
def test_invalid_ratios(ratios):
    with pytest.raises(LayoutError):
        RegionLayout(ratios, 4, 4)


def test_too_many_regions_for_the_canvas():
    with pytest.raises(LayoutError):
        even_layout(5, 4, 4)


def test_normalized_ratios_sum_to_one():
    ratios = normalize_ratios([0.01, 3.0, 7.0], 0.1)
    assert sum(ratios) == pytest.approx(1.0, abs=1e-15)
    assert ratios[0] == pytest.approx(0.1 / 10.1)
