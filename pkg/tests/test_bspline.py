"""Cubic B-spline FFD engine: basis oracles, warp exactness, landmark fit."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalreg import bspline as bs
from focalreg.rng import Rng


def small_volume(seed=0, n=24, spacing=0.5):
    vol = bs.Volume3D((n, n, n), (spacing,) * 3)
    vol.data[...] = Rng(seed).random(vol.data.shape)
    return vol


# ---------------------------------------------------------------------------
# basis function
# ---------------------------------------------------------------------------

class TestBasis:
    def test_closed_form_at_zero(self):
        b = bs.bspline_basis(np.array([0.0]))[0]
        assert np.allclose(b, [1 / 6, 4 / 6, 1 / 6, 0.0], atol=1e-15)

    def test_closed_form_at_half(self):
        b = bs.bspline_basis(np.array([0.5]))[0]
        assert np.allclose(b, [1 / 48, 23 / 48, 23 / 48, 1 / 48], atol=1e-15)

    def test_approaches_shifted_copy_at_one(self):
        b = bs.bspline_basis(np.array([1.0 - 1e-12]))[0]
        assert np.allclose(b, [0.0, 1 / 6, 4 / 6, 1 / 6], atol=1e-9)

    def test_non_negative(self):
        u = np.linspace(0, 1, 1001, endpoint=False)
        assert bs.bspline_basis(u).min() >= 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_partition_of_unity(self, seed):
        u = Rng(seed).random(257)
        s = bs.bspline_basis(u).sum(axis=-1)
        assert np.abs(s - 1.0).max() <= 1e-12


# ---------------------------------------------------------------------------
# displacement evaluation
# ---------------------------------------------------------------------------

def direct_sum_oracle(grid, pts):
    """Literal 64-term tensor-product sum, independently coded."""
    pts = np.atleast_2d(pts)
    out = np.zeros((pts.shape[0], 3))
    org = np.asarray(grid.grid_origin)
    spc = np.asarray(grid.grid_spacing)
    for n, p in enumerate(pts):
        rel = (p - org) / spc
        cell = np.floor(rel).astype(int)
        u = rel - cell
        bx = bs.bspline_basis(np.array([u[0]]))[0]
        by = bs.bspline_basis(np.array([u[1]]))[0]
        bz = bs.bspline_basis(np.array([u[2]]))[0]
        for c in range(4):
            for b in range(4):
                for a in range(4):
                    w = bx[a] * by[b] * bz[c]
                    out[n] += w * grid.disp[cell[2] - 1 + c,
                                            cell[1] - 1 + b,
                                            cell[0] - 1 + a]
    return out


class TestDisplacement:
    def random_grid(self, seed, dims=(6, 7, 8), spacing=4.0):
        rng = Rng(seed)
        grid = bs.BSplineGrid(dims, (spacing,) * 3, (-spacing,) * 3)
        grid.disp = rng.normal(0, 2.0, grid.disp.shape)
        return grid

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_sum(self, seed):
        grid = self.random_grid(seed)
        lo = np.zeros(3)
        hi = np.full(3, 8.0)
        pts = Rng(seed + 100).uniform(0, 1, (40, 3)) * (hi - lo) + lo
        got = bs.displacement_at(grid, pts)
        ref = direct_sum_oracle(grid, pts)
        assert np.abs(got - ref).max() <= 1e-9

    def test_constant_displacement_reproduced(self):
        grid = bs.BSplineGrid((6, 6, 6), (4.0,) * 3, (-4.0,) * 3)
        grid.disp[...] = [1.5, -2.0, 0.25]
        pts = Rng(1).uniform(0, 12, (50, 3))
        got = bs.displacement_at(grid, pts)
        assert np.abs(got - [1.5, -2.0, 0.25]).max() <= 1e-9

    def test_zero_grid_zero_displacement(self):
        grid = bs.BSplineGrid((5, 5, 5), (4.0,) * 3, (-4.0,) * 3)
        pts = Rng(2).uniform(0, 8, (20, 3))
        assert np.abs(bs.displacement_at(grid, pts)).max() == 0.0

    def test_support_violation_raises(self):
        grid = bs.BSplineGrid((4, 4, 4), (4.0,) * 3, (0.0,) * 3)
        with pytest.raises(bs.SupportError):
            bs.displacement_at(grid, np.array([[100.0, 0.0, 0.0]]))

    def test_field_matches_pointwise(self):
        vol = small_volume(3, n=12)
        grid = bs.grid_covering(vol, 2.0)
        grid.disp = Rng(4).normal(0, 1.0, grid.disp.shape)
        field = bs.displacement_field(grid, vol)
        nx, ny, nz = vol.dims
        idx = Rng(5).integers(0, nx, (30, 3))
        pts = vol.voxel_to_mm(idx)
        ref = bs.displacement_at(grid, pts)
        got = field[idx[:, 2], idx[:, 1], idx[:, 0]]
        assert np.abs(got - ref).max() <= 1e-9

    def test_smoothness_c2(self):
        # second finite differences of a cubic spline stay bounded and the
        # field contains no jumps: compare against a 2x finer sampling
        grid = self.random_grid(7)
        line = np.linspace(0.0, 8.0, 401)
        pts = np.stack([line, np.full_like(line, 4.0),
                        np.full_like(line, 4.0)], axis=1)
        d = bs.displacement_at(grid, pts)[:, 0]
        second = np.diff(d, 2)
        assert np.abs(np.diff(second)).max() < 1e-3   # third diff ~ h^3


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

class TestWarp:
    def test_identity_warp_exact(self):
        vol = small_volume(8)
        grid = bs.grid_covering(vol, 3.0)
        warped = bs.warp_volume(vol, grid)
        assert np.array_equal(warped.data, vol.data)

    def test_trilinear_voxel_centers_exact(self):
        vol = small_volume(9)
        idx = Rng(10).integers(0, 24, (50, 3))
        pts = vol.voxel_to_mm(idx)
        got = bs.trilinear_sample(vol, pts)
        ref = vol.data[idx[:, 2], idx[:, 1], idx[:, 0]]
        assert np.array_equal(got.astype(np.float32), ref)

    def test_trilinear_outside_fill(self):
        vol = small_volume(11)
        got = bs.trilinear_sample(vol, np.array([[-5.0, 0.0, 0.0]]),
                                  fill=-3.0)
        assert got[0] == -3.0

    def test_trilinear_midpoint_average(self):
        vol = bs.Volume3D((2, 2, 2), (1.0,) * 3)
        vol.data[...] = np.arange(8.0).reshape(2, 2, 2)
        got = bs.trilinear_sample(vol, np.array([[0.5, 0.5, 0.5]]))
        assert abs(got[0] - vol.data.mean()) < 1e-6

    def test_one_voxel_shift_matches_roll(self):
        """Backward-mapped constant +1-voxel displacement along x pulls each
        output voxel from its +x neighbour."""
        vol = small_volume(12, n=16, spacing=1.0)
        grid = bs.grid_covering(vol, 4.0)
        grid.disp[...] = [1.0, 0.0, 0.0]
        warped = bs.warp_volume(vol, grid)
        assert np.allclose(warped.data[:, :, :-1], vol.data[:, :, 1:],
                           atol=1e-5)


# ---------------------------------------------------------------------------
# landmark fitting
# ---------------------------------------------------------------------------

class TestLandmarkFit:
    def _subject(self, seed, n=64):
        vol = bs.Volume3D((n, n, n), (0.5,) * 3)
        vol.data[...] = Rng(seed).random(vol.data.shape)
        return vol

    def _landmarks(self, seed, vol, n_pts=15):
        lo, hi = vol.extent_mm()
        span = hi - lo
        return lo + 0.15 * span + Rng(seed).random((n_pts, 3)) * 0.7 * span

    def test_recovers_known_deformation(self):
        vol = self._subject(0)
        true = bs.random_deformation(Rng(1), vol, max_points=8,
                                     max_disp_mm=5.0)
        moving = self._landmarks(2, vol)
        fixed = moving + bs.displacement_at(true, moving)
        lms = bs.LandmarkSet(fixed, moving)
        fit = bs.fit_landmark_bspline(lms, vol, grid_spacing_mm=8.0)
        assert bs.mtre(lms, fit) <= 1e-3

    def test_residuals_match_mtre(self):
        vol = self._subject(3)
        moving = self._landmarks(4, vol)
        fixed = moving + Rng(5).normal(0, 1.0, moving.shape)
        lms = bs.LandmarkSet(fixed, moving)
        fit = bs.fit_landmark_bspline(lms, vol)
        res = bs.landmark_residuals(lms, fit)
        assert res.shape == (15,)
        assert abs(res.mean() - bs.mtre(lms, fit)) < 1e-12

    def test_mtre_3_4_5(self):
        lms = bs.LandmarkSet(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 5.0]]),
                             np.zeros((2, 3)))
        grid = bs.BSplineGrid((4, 4, 4), (10.0,) * 3, (-10.0,) * 3)
        assert bs.mtre(lms, grid) == 5.0

    def test_more_ridge_means_larger_residual(self):
        vol = self._subject(6)
        moving = self._landmarks(7, vol)
        fixed = moving + Rng(8).normal(0, 2.0, moving.shape)
        lms = bs.LandmarkSet(fixed, moving)
        light = bs.fit_landmark_bspline(lms, vol, ridge_lambda=1e-6)
        heavy = bs.fit_landmark_bspline(lms, vol, ridge_lambda=1e3)
        assert bs.mtre(lms, heavy) > bs.mtre(lms, light)

    def test_finer_grid_fits_tighter(self):
        vol = self._subject(9)
        true = bs.random_deformation(Rng(10), vol, max_points=10,
                                     max_disp_mm=8.0)
        moving = self._landmarks(11, vol)
        fixed = moving + bs.displacement_at(true, moving)
        lms = bs.LandmarkSet(fixed, moving)
        coarse = bs.fit_landmark_bspline(lms, vol, grid_spacing_mm=16.0)
        fine = bs.fit_landmark_bspline(lms, vol, grid_spacing_mm=8.0)
        assert bs.mtre(lms, fine) <= bs.mtre(lms, coarse) + 1e-9

    def test_landmark_validation(self):
        with pytest.raises(ValueError):
            bs.LandmarkSet(np.zeros((3, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            bs.LandmarkSet(np.zeros((2, 2)), np.zeros((2, 2)))


class TestGridAndDeformation:
    def test_grid_covering_supports_whole_volume(self):
        vol = small_volume(13, n=20)
        grid = bs.grid_covering(vol, 3.0)
        nx, ny, nz = vol.dims
        corners = vol.voxel_to_mm(np.array(
            [[0, 0, 0], [nx - 1, ny - 1, nz - 1]]))
        bs.displacement_at(grid, corners)   # must not raise

    def test_min_four_points_per_axis(self):
        with pytest.raises(ValueError):
            bs.BSplineGrid((3, 5, 5), (1.0,) * 3, (0.0,) * 3)

    def test_random_deformation_bounded(self):
        vol = small_volume(14)
        for seed in range(5):
            grid = bs.random_deformation(Rng(seed), vol, max_points=10,
                                         max_disp_mm=4.0)
            assert np.abs(grid.disp).max() <= 4.0

    def test_random_deformation_zero_amplitude(self):
        vol = small_volume(15)
        grid = bs.random_deformation(Rng(0), vol, max_disp_mm=0.0)
        assert np.abs(grid.disp).max() == 0.0

    def test_deterministic_in_stream(self):
        vol = small_volume(16)
        a = bs.random_deformation(Rng(7), vol)
        b = bs.random_deformation(Rng(7), vol)
        assert np.array_equal(a.disp, b.disp)
        assert a.grid_dims == b.grid_dims
