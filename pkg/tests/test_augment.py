"""图像块对增强：变换代数、对应关系与重叠"""

import numpy as np
import pytest

from core import augment
from core.phantom import canonical_at
from core.rng import make_rng
from utils.config_manager import AugmentConfig
from utils.error_handling import AugmentError


def translation(offset, size=(32, 32)) -> augment.SpatialTransform:
    return augment.SpatialTransform(crop_offset=tuple(float(v) for v in offset), crop_size=size, output_size=size)


def test_identity_transform_reproduces_image(small_phantom):
    identity = translation((0, 0), small_phantom.size)
    out = augment.resample(np.asarray(small_phantom.image, dtype=np.float64), identity)
    np.testing.assert_allclose(out, small_phantom.image, atol=1e-6)


def test_translation_correspondence(small_phantom):
    pair = augment.build_pair(small_phantom, translation((0, 0)), translation((8, 4)))
    np.testing.assert_allclose(augment.correspondence(pair, (10, 10)), (2.0, 6.0))
    assert augment.correspondence(pair, (2, 2)) is None


def test_correspondence_rejects_point_outside_patch(small_phantom):
    pair = augment.build_pair(small_phantom, translation((0, 0)), translation((8, 4)))
    with pytest.raises(AugmentError):
        augment.correspondence(pair, (40, 3))


def test_disjoint_crops_have_no_overlap(small_phantom):
    pair = augment.build_pair(small_phantom, translation((0, 0)), translation((32, 32)))
    assert not pair.has_overlap


def test_overlap_mask_matches_intersection(small_phantom):
    pair = augment.build_pair(small_phantom, translation((0, 0)), translation((16, 0)))
    expected = np.zeros((32, 32), dtype=bool)
    expected[16:, :] = True
    np.testing.assert_array_equal(pair.overlap_mask_a, expected)


def test_from_source_inverts_full_transform():
    rng = np.random.default_rng(3)
    transform = augment.SpatialTransform(
        crop_offset=(5.0, 7.0),
        crop_size=(40, 36),
        output_size=(32, 32),
        rotation=17.0,
        elastic=rng.uniform(-1.0, 1.0, size=(2, 4, 4)) * 1.6,
        flip_axes=(1,),
    )
    points = np.array([[3.0, 4.0], [16.5, 20.25], [28.0, 9.0]])
    np.testing.assert_allclose(transform.from_source(transform.to_source(points)), points, atol=1e-4)


def test_scale_maps_centers():
    transform = augment.SpatialTransform(crop_offset=(0.0, 0.0), crop_size=(64, 64), output_size=(32, 32))
    # 输出像素 i 的中心对应源图像 2i + 0.5
    np.testing.assert_allclose(transform.to_source([[0.0, 10.0]]), [[0.5, 20.5]])


def test_mapped_points_share_canonical_coordinates(small_phantom):
    cfg = AugmentConfig(patch_size=(32, 32), intensity_enabled=False)
    pair = augment.sample_pair(small_phantom, cfg, np.random.default_rng(9))
    grid = np.stack(np.meshgrid(np.arange(0, 32, 4), np.arange(0, 32, 4), indexing="ij"), axis=-1).reshape(-1, 2)
    mapped, valid = augment.map_points(pair, grid)
    if not valid.any():
        pytest.skip("sampled pair has no overlap on the sampling grid")
    source_a = pair.transform_a.to_source(grid[valid])
    source_b = pair.transform_b.to_source(mapped[valid])
    np.testing.assert_allclose(
        canonical_at(small_phantom, source_a), canonical_at(small_phantom, source_b), atol=1e-5
    )


def test_intensity_jitter_does_not_move_geometry(small_phantom):
    cfg = AugmentConfig(patch_size=(32, 32), crop_enabled=False, scale_enabled=False, deform_rotate_enabled=False)
    pair = augment.sample_pair(small_phantom, cfg, np.random.default_rng(0))
    assert pair.transform_a.crop_offset == pair.transform_b.crop_offset
    assert pair.overlap_mask_a.all()
    assert not np.array_equal(pair.patch_a, pair.patch_b)


def test_all_augmentations_off_gives_identical_views(small_phantom):
    cfg = AugmentConfig(
        patch_size=(32, 32),
        crop_enabled=False,
        scale_enabled=False,
        intensity_enabled=False,
        deform_rotate_enabled=False,
    )
    pair = augment.sample_pair(small_phantom, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(pair.patch_a, pair.patch_b)
    np.testing.assert_allclose(augment.correspondence(pair, (5, 7)), (5.0, 7.0))


def test_sample_pair_is_deterministic(small_phantom, no_jitter_augment):
    a = augment.sample_pair(small_phantom, no_jitter_augment, np.random.default_rng(42))
    b = augment.sample_pair(small_phantom, no_jitter_augment, np.random.default_rng(42))
    np.testing.assert_array_equal(a.patch_a, b.patch_a)
    np.testing.assert_array_equal(a.patch_b, b.patch_b)


def test_patch_larger_than_image_raises(small_phantom):
    with pytest.raises(AugmentError):
        augment.sample_pair(small_phantom, AugmentConfig(patch_size=(96, 96)), np.random.default_rng(0))


def test_flip_reverses_axis():
    transform = augment.SpatialTransform(crop_offset=(0.0, 0.0), crop_size=(8, 8), output_size=(8, 8), flip_axes=(1,))
    np.testing.assert_allclose(transform.to_source([[2.0, 1.0]]), [[2.0, 6.0]])


# ========================================
# 随机图像块对的对应关系
# ========================================
def _overlapping_pairs(phantoms, cfg, count):
    pairs = []
    for k in range(20 * count):
        phantom = phantoms[k % len(phantoms)]
        pair = augment.sample_pair(phantom, cfg, make_rng(31, "pair", k))
        if pair.has_overlap:
            pairs.append((phantom, pair))
        if len(pairs) == count:
            return pairs
    pytest.fail(f"only {len(pairs)} overlapping pairs out of {20 * count} draws")


@pytest.mark.parametrize("flip", [False, True])
def test_correspondence_round_trips_on_random_pairs(small_phantoms, flip):
    cfg = AugmentConfig(patch_size=(32, 32), intensity_enabled=False, flip_enabled=flip)
    gen = np.random.default_rng(12)
    checked = 0
    for _, pair in _overlapping_pairs(small_phantoms, cfg, 50):
        overlap = np.argwhere(pair.overlap_mask_a)
        jitter = gen.uniform(-0.25, 0.25, size=(1000, 2))
        points = np.clip(overlap[gen.integers(len(overlap), size=1000)] + jitter, 1e-3, 31 - 1e-3)
        mapped, valid = augment.map_points(pair, points, "a", "b")
        points, mapped = points[valid], mapped[valid]
        assert len(points) > 0

        back, _ = augment.map_points(pair, mapped, "b", "a")
        assert np.abs(back - points).max() < 1e-2

        again, _ = augment.map_points(pair, back, "a", "b")
        assert np.abs(again - mapped).max() < 1e-2

        checked += len(points)
    assert checked >= 25_000


def test_corresponding_points_share_canonical_coordinates(small_phantoms):
    cfg = AugmentConfig(patch_size=(32, 32), intensity_enabled=False, flip_enabled=True)
    gen = np.random.default_rng(13)
    for phantom, pair in _overlapping_pairs(small_phantoms, cfg, 50):
        overlap = np.argwhere(pair.overlap_mask_a)
        points = overlap[gen.integers(len(overlap), size=1000)].astype(np.float64)
        mapped, valid = augment.map_points(pair, points, "a", "b")
        source_a = pair.transform_a.to_source(points[valid])
        source_b = pair.transform_b.to_source(mapped[valid])
        np.testing.assert_allclose(canonical_at(phantom, source_a), canonical_at(phantom, source_b), atol=1e-6)


def test_quarter_turn_correspondence(small_phantom):
    rotated = augment.SpatialTransform((0.0, 0.0), (32, 32), (32, 32), rotation=90.0)
    pair = augment.build_pair(small_phantom, translation((0, 0)), rotated)
    np.testing.assert_allclose(augment.correspondence(pair, (5, 9)), (9.0, 26.0), atol=0.25)

    points = np.argwhere(np.ones((32, 32), dtype=bool)).astype(np.float64)
    mapped, _ = augment.map_points(pair, points, "a", "b")
    expected = np.stack([points[:, 1], 31.0 - points[:, 0]], axis=1)
    assert np.abs(mapped - expected).max() < 0.25
