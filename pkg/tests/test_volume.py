"""Container invariants, file round-trips, and scatter initialization."""

import json

import numpy as np
import pytest

from sweep4d.errors import DataError
from sweep4d.srrecon import PsfSpec
from sweep4d.volume import (
    Slice2D,
    SliceStack,
    Volume3D,
    export_slice_images,
    read_stack,
    read_volume,
    scatter_initialize,
    write_stack,
    write_volume,
)


def make_stack(T=20, ny=8, nx=8, seed=0, dz=0.5):
    rng = np.random.default_rng(seed)
    return SliceStack(
        data=rng.random((T, ny, nx)).astype(np.float32),
        dx=1.5,
        dy=1.5,
        z_positions=np.arange(T) * dz,
        acq_times=np.arange(T) * 0.49,
        slice_thickness=4.0,
    )


class TestContainerInvariants:
    def test_slice_rejects_nan(self):
        bad = np.ones((4, 4))
        bad[1, 2] = np.nan
        with pytest.raises(DataError):
            Slice2D(bad, 1.0, 1.0)

    def test_slice_rejects_nonpositive_spacing(self):
        with pytest.raises(DataError):
            Slice2D(np.ones((4, 4)), 0.0, 1.0)

    def test_stack_rejects_nonmonotonic_z(self):
        with pytest.raises(DataError):
            SliceStack(
                data=np.zeros((3, 4, 4)),
                dx=1.0,
                dy=1.0,
                z_positions=np.array([0.0, 2.0, 1.0]),
                acq_times=np.array([0.0, 1.0, 2.0]),
                slice_thickness=4.0,
            )

    def test_stack_rejects_decreasing_time(self):
        with pytest.raises(DataError):
            SliceStack(
                data=np.zeros((3, 4, 4)),
                dx=1.0,
                dy=1.0,
                z_positions=np.arange(3.0),
                acq_times=np.array([0.0, 2.0, 1.0]),
                slice_thickness=4.0,
            )

    def test_stack_descending_z_allowed(self):
        s = SliceStack(
            data=np.zeros((3, 4, 4)),
            dx=1.0,
            dy=1.0,
            z_positions=np.array([2.0, 1.0, 0.0]),
            acq_times=np.arange(3.0),
            slice_thickness=4.0,
        )
        assert s.T == 3

    def test_stack_length_mismatch(self):
        with pytest.raises(DataError):
            SliceStack(
                data=np.zeros((3, 4, 4)),
                dx=1.0,
                dy=1.0,
                z_positions=np.arange(2.0),
                acq_times=np.arange(3.0),
                slice_thickness=4.0,
            )

    def test_volume_rejects_inf(self):
        bad = np.ones((2, 2, 2))
        bad[0, 0, 0] = np.inf
        with pytest.raises(DataError):
            Volume3D(bad, (1.0, 1.0, 1.0))

    def test_volume_z_coords(self):
        v = Volume3D(np.zeros((4, 2, 2)), (1.0, 1.0, 2.0), origin=(0.0, 0.0, 5.0))
        np.testing.assert_allclose(v.z_coords, [5.0, 7.0, 9.0, 11.0])

    def test_subset_keeps_positions_and_times(self):
        s = make_stack(T=10)
        sub = s.subset([1, 4, 7])
        assert sub.T == 3
        np.testing.assert_array_equal(sub.z_positions, s.z_positions[[1, 4, 7]])
        np.testing.assert_array_equal(sub.acq_times, s.acq_times[[1, 4, 7]])

    def test_subset_empty_selection_rejected(self):
        with pytest.raises(DataError):
            make_stack().subset([])


class TestFileRoundTrip:
    def test_stack_round_trip_bitexact(self, tmp_path):
        s = make_stack(T=20)
        write_stack(s, tmp_path / "s")
        back = read_stack(tmp_path / "s")
        np.testing.assert_array_equal(back.data, s.data)
        np.testing.assert_array_equal(back.z_positions, s.z_positions)
        np.testing.assert_array_equal(back.acq_times, s.acq_times)
        assert back.slice_thickness == s.slice_thickness
        assert (back.dx, back.dy) == (s.dx, s.dy)

    def test_volume_round_trip_bitexact(self, tmp_path):
        rng = np.random.default_rng(3)
        v = Volume3D(rng.random((5, 6, 7)).astype(np.float32),
                     (1.0, 1.25, 2.0), origin=(0.5, -1.0, 3.0))
        write_volume(v, tmp_path / "v")
        back = read_volume(tmp_path / "v")
        np.testing.assert_array_equal(back.data, v.data)
        assert back.spacing == v.spacing
        assert back.origin == v.origin

    def test_round_trip_many_random_stacks(self, tmp_path):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            T = int(rng.integers(2, 12))
            s = make_stack(T=T, ny=int(rng.integers(2, 9)),
                           nx=int(rng.integers(2, 9)), seed=seed)
            write_stack(s, tmp_path / f"s{seed}")
            back = read_stack(tmp_path / f"s{seed}")
            np.testing.assert_array_equal(back.data, s.data)

    def test_zero_volume_payload_size(self, tmp_path):
        v = Volume3D(np.zeros((8, 8, 8), dtype=np.float32), (1.0, 1.0, 1.0))
        write_volume(v, tmp_path / "z")
        assert (tmp_path / "z.f32").stat().st_size == 8 * 8 * 8 * 4

    def test_payload_length_mismatch_rejected(self, tmp_path):
        v = Volume3D(np.zeros((4, 4, 4), dtype=np.float32), (1.0, 1.0, 1.0))
        write_volume(v, tmp_path / "v")
        header = json.loads((tmp_path / "v.json").read_text())
        header["dims"] = [4, 4, 5]
        (tmp_path / "v.json").write_text(json.dumps(header))
        with pytest.raises(DataError, match="length mismatch"):
            read_volume(tmp_path / "v")

    def test_missing_sidecar_rejected(self, tmp_path):
        np.zeros(8, dtype="<f4").tofile(tmp_path / "x.f32")
        with pytest.raises(DataError, match="sidecar"):
            read_volume(tmp_path / "x")

    def test_corrupt_sidecar_rejected(self, tmp_path):
        np.zeros(8, dtype="<f4").tofile(tmp_path / "x.f32")
        (tmp_path / "x.json").write_text("{not json")
        with pytest.raises(DataError, match="corrupt"):
            read_volume(tmp_path / "x")

    def test_role_mismatch_rejected(self, tmp_path):
        s = make_stack(T=3)
        write_stack(s, tmp_path / "s")
        with pytest.raises(DataError, match="role"):
            read_volume(tmp_path / "s")

    def test_payload_is_little_endian_x_fastest(self, tmp_path):
        data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        write_volume(Volume3D(data, (1.0, 1.0, 1.0)), tmp_path / "v")
        raw = np.fromfile(tmp_path / "v.f32", dtype="<f4")
        np.testing.assert_array_equal(raw, np.arange(24, dtype=np.float32))


class TestScatterInitialize:
    def test_single_slice_profile_proportional(self):
        ny = nx = 4
        sl = np.outer(np.arange(1, ny + 1), np.ones(nx)).astype(np.float32)
        stack = SliceStack(sl[None], 1.0, 1.0, np.array([0.0]),
                           np.array([0.0]), 4.0)
        grid = Volume3D(np.zeros((9, ny, nx), dtype=np.float32),
                        (1.0, 1.0, 1.0), origin=(0.0, 0.0, -4.0))
        v0 = scatter_initialize(stack, grid, PsfSpec(fwhm_mm=4.0))
        # one contributing slice: normalization makes every plane a copy of it
        for z in range(9):
            np.testing.assert_allclose(v0.data[z], sl, rtol=1e-6)

    def test_tiling_slices_with_narrow_psf_reassemble(self):
        rng = np.random.default_rng(1)
        data = rng.random((6, 4, 4)).astype(np.float32)
        stack = SliceStack(data, 1.0, 1.0, np.arange(6.0),
                           np.arange(6.0), 4.0)
        grid = Volume3D(np.zeros((6, 4, 4), dtype=np.float32), (1.0, 1.0, 1.0))
        # PSF so narrow that each grid plane sees only its own slice
        v0 = scatter_initialize(stack, grid, PsfSpec(fwhm_mm=1e-3))
        np.testing.assert_allclose(v0.data, data, rtol=1e-5)

    def test_linear_in_intensities(self):
        s = make_stack(T=8, dz=1.0)
        grid = Volume3D(np.zeros((8, 8, 8), dtype=np.float32), (1.5, 1.5, 1.0))
        a = 3.7
        scaled = SliceStack(s.data * a, s.dx, s.dy, s.z_positions,
                            s.acq_times, s.slice_thickness)
        v1 = scatter_initialize(s, grid, PsfSpec(fwhm_mm=4.0))
        v2 = scatter_initialize(scaled, grid, PsfSpec(fwhm_mm=4.0))
        np.testing.assert_allclose(v2.data, a * v1.data, rtol=1e-5)

    def test_far_planes_filled_from_nearest(self):
        sl = np.full((1, 4, 4), 2.0, dtype=np.float32)
        stack = SliceStack(sl, 1.0, 1.0, np.array([0.0]), np.array([0.0]), 1.0)
        grid = Volume3D(np.zeros((30, 4, 4), dtype=np.float32),
                        (1.0, 1.0, 1.0), origin=(0.0, 0.0, -2.0))
        v0 = scatter_initialize(stack, grid, PsfSpec(fwhm_mm=1.0))
        assert np.all(np.isfinite(v0.data))
        np.testing.assert_allclose(v0.data[-1], 2.0, rtol=1e-6)

    def test_inplane_mismatch_rejected(self):
        s = make_stack(T=4)
        grid = Volume3D(np.zeros((4, 6, 6), dtype=np.float32), (1.0, 1.0, 1.0))
        with pytest.raises(DataError, match="mismatch"):
            scatter_initialize(s, grid, PsfSpec(fwhm_mm=4.0))


class TestExportImages:
    def test_constant_volume_mid_gray(self, tmp_path):
        from PIL import Image

        v = Volume3D(np.full((3, 4, 5), 7.0, dtype=np.float32), (1, 1, 1))
        paths = export_slice_images(v, "z", tmp_path)
        arr = np.asarray(Image.open(paths[0]))
        assert np.all(arr == 128)

    def test_file_count_matches_axis(self, tmp_path):
        v = Volume3D(np.zeros((3, 4, 5), dtype=np.float32), (1, 1, 1))
        assert len(export_slice_images(v, "z", tmp_path / "z")) == 3
        assert len(export_slice_images(v, "y", tmp_path / "y")) == 4
        assert len(export_slice_images(v, "x", tmp_path / "x")) == 5

    def test_ramp_volume_monotone_rows(self, tmp_path):
        from PIL import Image

        ramp = np.tile(np.arange(8, dtype=np.float32), (8, 8, 1))
        v = Volume3D(ramp, (1, 1, 1))
        paths = export_slice_images(v, "z", tmp_path)
        arr = np.asarray(Image.open(paths[0])).astype(int)
        assert np.all(np.diff(arr, axis=1) >= 0)
        assert arr[0, 0] < arr[0, -1]

    def test_bad_axis_rejected(self, tmp_path):
        v = Volume3D(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1))
        with pytest.raises(DataError):
            export_slice_images(v, "w", tmp_path)
