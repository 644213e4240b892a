"""Volume container, log-ratio normalization, and crop sampling tests."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from oximap.volume import (
    DEFAULT_VOXEL_SIZE_MM,
    Volume4D,
    crop_xy,
    normalize_volume,
    random_crop_xy,
    valid_crop_corners,
)


def grid_volume(h=4, w=5, d=3, n_t=11, rng=None, mask=None):
    rng = rng or np.random.default_rng(0)
    data = rng.uniform(0.5, 1.5, size=(h, w, d, n_t))
    return Volume4D(data, mask)


class TestVolume4D:
    def test_default_mask_is_all_true(self):
        vol = grid_volume()
        assert vol.mask.all()
        assert vol.n_masked == 4 * 5 * 3
        assert vol.grid_shape == (4, 5, 3)
        assert vol.n_t == 11
        assert vol.voxel_size_mm == DEFAULT_VOXEL_SIZE_MM

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match="4-D"):
            Volume4D(np.zeros((4, 5, 3)))

    def test_rejects_mask_shape_mismatch(self):
        with pytest.raises(ValueError, match="mask shape"):
            Volume4D(np.zeros((4, 5, 3, 2)), np.ones((4, 5, 2), dtype=bool))

    def test_rejects_nonfinite_inside_mask(self):
        data = np.ones((2, 2, 1, 3))
        data[0, 0, 0, 1] = np.nan
        with pytest.raises(ValueError, match="finite"):
            Volume4D(data)

    def test_nonfinite_outside_mask_allowed(self):
        data = np.ones((2, 2, 1, 3))
        data[0, 0, 0, 1] = np.inf
        mask = np.ones((2, 2, 1), dtype=bool)
        mask[0, 0, 0] = False
        vol = Volume4D(data, mask)
        assert vol.n_masked == 3

    def test_rejects_bad_voxel_size(self):
        with pytest.raises(ValueError, match="voxel_size_mm"):
            Volume4D(np.ones((2, 2, 1, 3)), voxel_size_mm=(2.3, 0.0, 7.5))
        with pytest.raises(ValueError, match="voxel_size_mm"):
            Volume4D(np.ones((2, 2, 1, 3)), voxel_size_mm=(2.3, 2.3))

    def test_masked_signals_c_scan_order(self):
        data = np.arange(2 * 2 * 1 * 3, dtype=float).reshape(2, 2, 1, 3)
        mask = np.array([[[True], [False]], [[True], [True]]])
        rows = Volume4D(data, mask).masked_signals()
        # C order walks (0,0,0), (1,0,0), (1,1,0)
        assert_allclose(rows, data.reshape(4, 3)[[0, 2, 3]])


class TestNormalizeVolume:
    def test_log_ratio_values(self, proto):
        rng = np.random.default_rng(3)
        vol = grid_volume(rng=rng)
        out, dropped = normalize_volume(vol, proto)
        assert dropped == 0
        se = vol.data[..., proto.se_index : proto.se_index + 1]
        assert_allclose(out.data, np.log(vol.data / se), rtol=1e-12)
        # spin-echo channel is exactly zero after normalization
        assert np.all(out.data[..., proto.se_index] == 0.0)

    def test_scale_invariance(self, proto):
        vol = grid_volume()
        scaled = Volume4D(vol.data * 137.0, vol.mask, vol.voxel_size_mm)
        a, _ = normalize_volume(vol, proto)
        b, _ = normalize_volume(scaled, proto)
        assert_allclose(a.data, b.data, rtol=0, atol=1e-12)

    def test_drops_nonpositive_rows(self, proto):
        vol = grid_volume()
        vol.data[1, 2, 0, 4] = 0.0
        vol.data[3, 0, 2, 0] = -0.1
        out, dropped = normalize_volume(vol, proto)
        assert dropped == 2
        assert not out.mask[1, 2, 0] and not out.mask[3, 0, 2]
        assert out.n_masked == vol.n_masked - 2
        # dropped voxels are zero-filled, not NaN, so the container stays valid
        assert np.all(out.data[1, 2, 0] == 0.0)

    def test_rejects_protocol_mismatch(self, proto):
        vol = grid_volume(n_t=5)
        with pytest.raises(ValueError, match="tau samples"):
            normalize_volume(vol, proto)


class TestCrops:
    def test_crop_extracts_block(self):
        vol = grid_volume(h=6, w=6)
        sub = crop_xy(vol, 1, 2, 3)
        assert sub.grid_shape == (3, 3, 3)
        assert_allclose(sub.data, vol.data[1:4, 2:5])
        assert np.array_equal(sub.mask, vol.mask[1:4, 2:5])
        assert sub.voxel_size_mm == vol.voxel_size_mm

    def test_crop_bounds_errors(self):
        vol = grid_volume(h=4, w=5)
        for x0, y0, size in [(-1, 0, 2), (0, -1, 2), (3, 0, 2), (0, 4, 2), (0, 0, 0)]:
            with pytest.raises(ValueError, match="crop"):
                crop_xy(vol, x0, y0, size)

    def test_valid_corners_match_brute_force(self):
        rng = np.random.default_rng(11)
        mask = rng.random((7, 6, 2)) < 0.2
        data = np.ones((7, 6, 2, 3))
        vol = Volume4D(data, mask)
        size = 3
        got = {tuple(c) for c in valid_crop_corners(vol, size)}
        want = {
            (x0, y0)
            for x0 in range(7 - size + 1)
            for y0 in range(6 - size + 1)
            if mask[x0 : x0 + size, y0 : y0 + size].any()
        }
        assert got == want

    def test_valid_corners_size_error(self):
        vol = grid_volume(h=4, w=5)
        with pytest.raises(ValueError, match="crop size"):
            valid_crop_corners(vol, 6)

    def test_random_crop_uniform_over_valid_corners(self):
        # single masked voxel at (2, 3): exactly the 2x2 corners covering it qualify
        mask = np.zeros((5, 5, 1), dtype=bool)
        mask[2, 3, 0] = True
        vol = Volume4D(np.ones((5, 5, 1, 2)), mask)
        valid = {tuple(c) for c in valid_crop_corners(vol, 2)}
        assert valid == {(1, 2), (1, 3), (2, 2), (2, 3)}
        rng = np.random.default_rng(7)
        counts = {c: 0 for c in valid}
        n = 4000
        for _ in range(n):
            sub = random_crop_xy(vol, 2, rng)
            # recover the corner by locating the masked voxel inside the crop
            pos = np.argwhere(sub.mask)[0]
            counts[(2 - pos[0], 3 - pos[1])] += 1
        for c in valid:
            assert abs(counts[c] / n - 0.25) < 0.04

    def test_random_crop_needs_masked_voxel(self):
        vol = Volume4D(np.ones((4, 4, 1, 2)), np.zeros((4, 4, 1), dtype=bool))
        with pytest.raises(ValueError, match="masked voxel"):
            random_crop_xy(vol, 2, np.random.default_rng(0))
