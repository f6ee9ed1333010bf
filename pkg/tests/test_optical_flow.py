import numpy as np
import pytest

from medi.errors import DataError
from medi.optical_flow import (
    FlowConfig,
    FlowField,
    estimate_flow,
    mean_magnitude,
    read_flo,
    write_flo,
)

from conftest import smooth_texture


def translated_pair(shift_x, shift_y, size=64, seed=0, margin=8):
    """src and an edge-consistent integer-translated dst, from one big texture."""
    big = smooth_texture(size + 2 * margin, size + 2 * margin, seed=seed, cell=4)
    src = big[margin : margin + size, margin : margin + size]
    dst = big[margin - shift_y : margin - shift_y + size, margin - shift_x : margin - shift_x + size]
    return np.ascontiguousarray(src), np.ascontiguousarray(dst)


class TestEstimateFlow:
    def test_identical_frames_zero_flow(self, rng):
        frame = rng.random((48, 48)).astype(np.float32)
        field = estimate_flow(frame, frame)
        assert np.abs(field.dx).max() < 1e-6
        assert np.abs(field.dy).max() < 1e-6

    def test_translation_recovered(self):
        src, dst = translated_pair(3, 4)
        field = estimate_flow(src, dst)
        h, w = src.shape
        cy, cx = int(h * 0.1), int(w * 0.1)
        err = np.hypot(
            field.dx[cy : h - cy, cx : w - cx] - 3.0,
            field.dy[cy : h - cy, cx : w - cx] - 4.0,
        )
        assert err.mean() < 0.5

    @pytest.mark.parametrize("shift", [(1, 0), (-2, 1), (0, -3), (4, 4)])
    def test_shift_equivariance_median(self, shift):
        sx, sy = shift
        src, dst = translated_pair(sx, sy, seed=abs(sx) * 7 + abs(sy) + 1)
        field = estimate_flow(src, dst)
        assert abs(np.median(field.dx) - sx) < 0.5
        assert abs(np.median(field.dy) - sy) < 0.5

    def test_channel_mean_luminance(self, rng):
        gray = rng.random((32, 32)).astype(np.float32)
        color = np.stack([gray, gray, gray], axis=2)
        a = estimate_flow(gray, gray)
        b = estimate_flow(color, color)
        assert np.array_equal(a.dx, b.dx) and np.array_equal(a.dy, b.dy)

    def test_too_small_image(self):
        img = np.zeros((8, 8), dtype=np.float32)
        with pytest.raises(ValueError, match="image too small"):
            estimate_flow(img, img, FlowConfig(min_level_size=16))

    def test_shape_mismatch(self):
        a = np.zeros((32, 32), dtype=np.float32)
        b = np.zeros((32, 48), dtype=np.float32)
        with pytest.raises(ValueError, match="shapes differ"):
            estimate_flow(a, b)

    def test_deterministic(self):
        src, dst = translated_pair(2, -1, seed=9)
        f1 = estimate_flow(src, dst)
        f2 = estimate_flow(src, dst)
        assert np.array_equal(f1.dx, f2.dx) and np.array_equal(f1.dy, f2.dy)


class TestMeanMagnitude:
    def test_uniform_three_four_is_five(self):
        field = FlowField(dx=np.full((10, 10), 3.0), dy=np.full((10, 10), 4.0))
        assert mean_magnitude(field) == 5.0

    def test_zero_field(self):
        field = FlowField(dx=np.zeros((5, 5)), dy=np.zeros((5, 5)))
        assert mean_magnitude(field) == 0.0

    def test_two_population_average(self):
        dx = np.zeros((4, 4))
        dy = np.zeros((4, 4))
        dx[:2], dy[:2] = 3.0, 4.0
        assert mean_magnitude(FlowField(dx=dx, dy=dy)) == 2.5

    def test_permutation_and_sign_invariance(self, rng):
        dx = rng.standard_normal((8, 8))
        dy = rng.standard_normal((8, 8))
        base = mean_magnitude(FlowField(dx=dx, dy=dy))
        perm = rng.permutation(64)
        shuffled = mean_magnitude(
            FlowField(dx=dx.ravel()[perm].reshape(8, 8), dy=dy.ravel()[perm].reshape(8, 8))
        )
        flipped = mean_magnitude(FlowField(dx=-dx, dy=-dy))
        assert abs(base - shuffled) < 1e-12
        assert flipped == base


class TestFloFiles:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        field = FlowField(
            dx=rng.standard_normal((13, 17)).astype(np.float32),
            dy=rng.standard_normal((13, 17)).astype(np.float32),
        )
        path = tmp_path / "field.flo"
        write_flo(field, path)
        back = read_flo(path)
        assert np.array_equal(back.dx, field.dx)
        assert np.array_equal(back.dy, field.dy)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(DataError, match="not a flo file"):
            read_flo(path)

    def test_truncated_payload(self, tmp_path, rng):
        field = FlowField(
            dx=rng.standard_normal((6, 6)).astype(np.float32),
            dy=rng.standard_normal((6, 6)).astype(np.float32),
        )
        path = tmp_path / "cut.flo"
        write_flo(field, path)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(DataError, match="truncated flo payload"):
            read_flo(path)
