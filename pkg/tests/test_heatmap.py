import math

import numpy as np
import pytest

from gazereg.errors import ParameterError, ShapeError
from gazereg.heatmap import (
    BINARY,
    CONTINUOUS,
    Heatmap,
    binarize,
    gaussian_splat,
    load_heatmap,
    overlay,
    save_heatmap,
)
from gazereg.ingest import AGGREGATED, SINGULAR, AlignmentWindow, GazeSample


def window(points, mode=AGGREGATED, frame_id=0):
    samples = tuple(GazeSample(33 * i, float(x), float(y)) for i, (x, y) in enumerate(points))
    return AlignmentWindow(frame_id=frame_id, mode=mode, delta_ms=200, selected=samples)


def scalar_gaussian_sum(points, x, y, sigma):
    """Independent scalar oracle: mean of unit Gaussians at (x, y)."""
    total = math.fsum(
        math.exp(-((x - px) ** 2 + (y - py) ** 2) / (2.0 * sigma * sigma))
        for px, py in points
    )
    return total / len(points)


class TestGaussianSplat:
    def test_single_point_peaks_at_that_pixel(self):
        h = gaussian_splat(window([(8, 8)], SINGULAR), 17, 17, 2.0)
        assert h.kind == CONTINUOUS
        peak = np.unravel_index(np.argmax(h.values), h.values.shape)
        assert peak == (8, 8)
        assert h.values[8, 8] == pytest.approx(1.0)

    def test_two_identical_points_match_single(self):
        one = gaussian_splat(window([(5, 7)]), 16, 16, 1.5)
        two = gaussian_splat(window([(5, 7), (5, 7)]), 16, 16, 1.5)
        np.testing.assert_allclose(two.values, one.values, rtol=0, atol=1e-15)

    def test_two_point_value_matches_scalar_oracle(self):
        # frozen from the oracle: ((1 + exp(-64)) / 2) at either point
        pts = [(4, 4), (12, 12)]
        h = gaussian_splat(window(pts), 16, 16, 1.0)
        expect = scalar_gaussian_sum(pts, 4, 4, 1.0)
        assert expect == pytest.approx((1.0 + math.exp(-64.0)) / 2.0, abs=1e-30)
        assert h.values[4, 4] == pytest.approx(expect, abs=1e-12)
        # oracle over every pixel
        for yy in range(0, 16, 3):
            for xx in range(0, 16, 3):
                assert h.values[yy, xx] == pytest.approx(
                    scalar_gaussian_sum(pts, xx, yy, 1.0), abs=1e-12
                )

    def test_empty_window_all_zero(self):
        h = gaussian_splat(window([]), 8, 8, 1.0)
        assert not h.values.any()

    def test_out_of_bounds_skipped_and_counted(self):
        h = gaussian_splat(window([(4, 4), (-1, 3), (3, 900)]), 8, 8, 1.0)
        assert h.excluded_samples == 2
        assert h.values[4, 4] == pytest.approx(1.0)

    def test_sigma_validation(self):
        with pytest.raises(ParameterError):
            gaussian_splat(window([(1, 1)]), 8, 8, 0.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pts = [tuple(p) for p in rng.uniform(0, 15, size=(6, 2))]
        a = gaussian_splat(window(pts), 16, 16, 2.0)
        b = gaussian_splat(window(pts[::-1]), 16, 16, 2.0)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)

    def test_translation_equivariance_interior(self):
        pts = [(6.0, 7.0), (8.5, 6.5)]
        shifted = [(x + 3, y + 2) for x, y in pts]
        a = gaussian_splat(window(pts), 32, 32, 1.5).values
        b = gaussian_splat(window(shifted), 32, 32, 1.5).values
        # compare away from boundaries where truncation differs
        np.testing.assert_allclose(b[10:26, 10:26], a[8:24, 7:23], atol=1e-9)


class TestBinarize:
    def test_all_zero_stays_zero(self):
        h = Heatmap(values=np.zeros((8, 8)), frame_id=0, kind=CONTINUOUS)
        assert not binarize(h, 0.5).values.any()

    def test_disk_radius_matches_analytic(self):
        sigma = 3.0
        h = gaussian_splat(window([(16, 16)], SINGULAR), 33, 33, sigma)
        b = binarize(h, 0.5)
        assert b.kind == BINARY
        r = sigma * math.sqrt(2 * math.log(2))
        ys, xs = np.mgrid[0:33, 0:33]
        dist = np.hypot(xs - 16, ys - 16)
        # brute-force pixel comparison against the analytic radius
        assert (b.values[dist <= r - 1] == 1).all()
        assert (b.values[dist >= r + 1] == 0).all()

    def test_tiny_tau_keeps_every_positive_pixel(self):
        h = gaussian_splat(window([(4, 4)], SINGULAR), 8, 8, 1.0)
        b = binarize(h, 1e-12)
        assert (b.values == (h.values > 0)).all()

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            pts = [tuple(p) for p in rng.uniform(0, 15, size=(3, 2))]
            h = gaussian_splat(window(pts), 16, 16, 2.0)
            lo = binarize(h, 0.3).values
            hi = binarize(h, 0.7).values
            assert not ((hi == 1) & (lo == 0)).any()

    def test_tau_validation(self):
        h = Heatmap(values=np.ones((4, 4)), frame_id=0, kind=CONTINUOUS)
        for tau in (0.0, -1.0, 1.5):
            with pytest.raises(ParameterError):
                binarize(h, tau)

    def test_requires_continuous(self):
        h = Heatmap(values=np.ones((4, 4)), frame_id=0, kind=BINARY)
        with pytest.raises(ParameterError):
            binarize(h, 0.5)


class TestOverlay:
    def base(self):
        rng = np.random.default_rng(5)
        return rng.uniform(0, 1, size=(16, 16, 3))

    def test_alpha_zero_is_identity(self):
        base = self.base()
        h = gaussian_splat(window([(8, 8)], SINGULAR), 16, 16, 2.0)
        out = overlay(base, h, 0.0)
        np.testing.assert_array_equal(out.pixels, base)

    def test_zero_heatmap_is_identity(self):
        base = self.base()
        h = Heatmap(values=np.zeros((16, 16)), frame_id=0, kind=CONTINUOUS)
        np.testing.assert_array_equal(overlay(base, h, 0.7).pixels, base)

    def test_alpha_one_peak_pixel_is_highlight(self):
        base = self.base()
        h = gaussian_splat(window([(8, 8)], SINGULAR), 16, 16, 2.0)
        out = overlay(base, h, 1.0)
        np.testing.assert_allclose(out.pixels[8, 8], [1.0, 0.0, 0.0], atol=1e-12)

    def test_bit_reproducible(self):
        base = self.base()
        h = gaussian_splat(window([(3, 9), (5, 5)]), 16, 16, 1.0)
        a = overlay(base, h, 0.4).pixels
        b = overlay(base, h, 0.4).pixels
        assert (a == b).all()

    def test_dimension_mismatch(self):
        h = Heatmap(values=np.zeros((8, 8)), frame_id=0, kind=CONTINUOUS)
        with pytest.raises(ShapeError):
            overlay(np.zeros((9, 8, 3)), h, 0.5)

    def test_alpha_validation(self):
        h = Heatmap(values=np.zeros((8, 8)), frame_id=0, kind=CONTINUOUS)
        with pytest.raises(ParameterError):
            overlay(np.zeros((8, 8, 3)), h, 1.5)


class TestHeatmapContainer:
    def test_roundtrip(self, tmp_path):
        h = gaussian_splat(window([(3, 4)], SINGULAR), 8, 6, 1.0)
        f32 = h.values.astype(np.float32).astype(np.float64)
        path = str(tmp_path / "h.ghm")
        save_heatmap(path, h)
        back = load_heatmap(path, frame_id=0)
        assert back.kind == CONTINUOUS
        np.testing.assert_array_equal(back.values, f32)

    def test_binary_kind_roundtrip(self, tmp_path):
        h = binarize(gaussian_splat(window([(3, 4)], SINGULAR), 8, 6, 1.0), 0.5)
        path = str(tmp_path / "b.ghm")
        save_heatmap(path, h)
        assert load_heatmap(path).kind == BINARY
