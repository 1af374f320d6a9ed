import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from cta_recon.centerline import (Centerline, CenterlineConfig, SeedPair, TrappedBacktraceError,
                                  backtrace_path, compute_ml, extract_centerline, fast_march,
                                  lumen_weight_map, path_cost, smooth_polyline, speed_map)
from cta_recon.config import PipelineConfig
from cta_recon.grid import BoundsError, GridError, VoxelGrid
from cta_recon.membership import EmptySelectionError, ThresholdConfig, bell
from cta_recon.phantom import make_path, recipe
from cta_recon.vesselness import frangi_vesselness


def ones(n=21, spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid.from_array(np.ones((n, n, n)), spacing, kind="weight")


class TestComputeMl:
    def test_median_of_candidates(self):
        g = VoxelGrid.from_array(np.array([50.0, 150.0, 250.0, 350.0]).reshape(4, 1, 1))
        w = g.with_values(np.full((4, 1, 1), 0.3), kind="weight")
        assert compute_ml(g, w) == 250.0

    def test_all_dark(self):
        g = VoxelGrid.from_array(np.full((3, 3, 3), 100.0))
        with pytest.raises(EmptySelectionError, match="no vessel candidates"):
            compute_ml(g, g.with_values(np.ones((3, 3, 3)), kind="weight"))

    def test_no_vesselness(self):
        g = VoxelGrid.from_array(np.full((3, 3, 3), 400.0))
        with pytest.raises(EmptySelectionError):
            compute_ml(g, g.with_values(np.zeros((3, 3, 3)), kind="weight"))


class TestLumenWeight:
    # the bell reaches half height at both ends of the band
    # [min(ml - l_thres, 500), ml + cp_thres]
    ml = 350.0
    lo, hi = 270.0, 750.0

    def weight(self, hu):
        g = VoxelGrid.from_array(np.asarray(hu, dtype=float).reshape(-1, 1, 1))
        return lumen_weight_map(g, self.ml).values.ravel()

    def test_peak(self):
        assert self.weight([0.5 * (self.lo + self.hi)])[0] == pytest.approx(1.0, abs=1e-12)

    def test_half_height_crossings(self):
        np.testing.assert_allclose(self.weight([self.lo, self.hi]), 0.55, atol=1e-12)

    def test_air_approaches_floor(self):
        w = self.weight([-1000.0])[0]
        assert 0.1 < w < 0.1 + 1e-3

    def test_range(self):
        w = self.weight(np.linspace(-1500, 3000, 400))
        assert w.min() >= 0.1 and w.max() <= 1.0

    def test_upper_band_is_clamped(self):
        cfg = ThresholdConfig()
        g = VoxelGrid.from_array(np.array([500.0, 1200.0]).reshape(2, 1, 1))
        w = lumen_weight_map(g, 800.0, cfg).values.ravel()
        np.testing.assert_allclose(w, 0.55, atol=1e-12)

    def test_literal_reading_would_starve_the_lumen(self):
        # a bell centred at ml + cp_thres with half width ml - l_thres leaves
        # a lumen at ml with barely more than the 0.1 floor
        g = bell(self.ml, self.ml + 400.0, self.ml - 80.0, 4.0)
        assert 0.9 * g + 0.1 < 0.15
        assert self.weight([self.ml])[0] > 0.9


class TestSpeedMap:
    def test_examples(self):
        wv = VoxelGrid.from_array(np.array([1.0, 0.0, 0.5]).reshape(3, 1, 1), kind="weight")
        wl = wv.with_values(np.array([1.0, 0.7, 0.55]).reshape(3, 1, 1))
        np.testing.assert_allclose(speed_map(wv, wl).values.ravel(), [1.0, 1e-3, 0.275])

    @given(st.floats(0, 1), st.floats(0.1, 1))
    def test_floor_and_product(self, a, b):
        wv = VoxelGrid.from_array(np.full((1, 1, 1), a), kind="weight")
        v = speed_map(wv, wv.with_values(np.full((1, 1, 1), b))).values[0, 0, 0]
        assert v == max(a * b, 1e-3)


class TestFastMarch:
    def test_seed_time_is_zero(self):
        T = fast_march(ones(), [(3.0, 4.0, 5.0), (15.0, 15.0, 15.0)]).times.values
        assert T[3, 4, 5] == 0.0 and T[15, 15, 15] == 0.0
        assert np.all(T >= 0)

    def test_accepted_order_is_monotone(self):
        rng = np.random.default_rng(1)
        speed = VoxelGrid.from_array(rng.uniform(0.05, 1.0, size=(15, 16, 17)),
                                     (0.4, 0.4, 0.5), kind="weight")
        res = fast_march(speed, [(2.0, 2.0, 2.0)])
        assert np.all(np.diff(res.accepted) >= 0)
        assert np.all(np.isfinite(res.times.values))

    def test_first_order_constant_speed(self):
        n = 31
        c = 15.0
        T = fast_march(ones(n), [(c, c, c)], order=1, init_radius_voxels=0.0).times.values
        r = np.linalg.norm(np.indices((n, n, n)) - c, axis=0)
        # first-order multistencil: axis and diagonal directions are exact
        assert T[25, 15, 15] == pytest.approx(10.0)
        far = r >= 8
        assert (np.abs(T[far] - r[far]) / r[far]).max() < 0.1

    def test_anisotropic_spacing_uses_mm(self):
        sp = (0.5, 0.5, 1.0)
        T = fast_march(ones(21, sp), [(5.0, 5.0, 10.0)]).times.values
        assert T[20, 10, 10] == pytest.approx(5.0, rel=0.02)
        assert T[10, 10, 20] == pytest.approx(10.0, rel=0.02)

    def test_seed_outside(self):
        with pytest.raises(BoundsError):
            fast_march(ones(5), [(10.0, 0.0, 0.0)])

    def test_nonpositive_speed(self):
        with pytest.raises(GridError):
            fast_march(ones(5).with_values(np.zeros((5, 5, 5))), [(0.0, 0.0, 0.0)])

    def test_early_stop_keeps_accepted_values(self):
        rng = np.random.default_rng(2)
        v = rng.uniform(0.1, 1.0, size=(20, 20, 20))
        speed = VoxelGrid.from_array(v, kind="weight")
        full = fast_march(speed, [(1.0, 1.0, 1.0)]).times.values
        part = fast_march(speed, [(1.0, 1.0, 1.0)], stop_at=(10.0, 10.0, 10.0),
                          stop_factor=1.5).times.values
        done = np.isfinite(part)
        assert 0 < done.sum() < done.size
        np.testing.assert_array_equal(part[done], full[done])
        assert part[10, 10, 10] == full[10, 10, 10]
        assert np.all(full[~done] >= 1.5 * full[10, 10, 10])

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        speed = VoxelGrid.from_array(rng.uniform(0.1, 1.0, size=(12, 12, 12)), kind="weight")
        a = fast_march(speed, [(0.0, 0.0, 0.0)]).times.values
        b = fast_march(speed, [(0.0, 0.0, 0.0)]).times.values
        np.testing.assert_array_equal(a, b)


class TestBacktrace:
    def test_corner_to_corner_is_straight(self):
        n = 21
        T = fast_march(ones(n), [(0.0, 0.0, 0.0)])
        end = (20.0, 20.0, 20.0)
        line = backtrace_path(T, end)
        straight = np.sqrt(3) * 20.0
        assert abs(line.length - straight) / straight <= 0.03
        np.testing.assert_allclose(line.points[0], 0.0)
        np.testing.assert_allclose(line.points[-1], end)

    def test_degenerate_end(self):
        T = fast_march(ones(7), [(3.0, 3.0, 3.0)])
        line = backtrace_path(T, (3.0, 3.0, 3.0))
        assert len(line.points) == 2 and line.length > 0

    def test_step_spacing(self):
        T = fast_march(ones(15), [(0.0, 7.0, 7.0)])
        line = backtrace_path(T, (14.0, 7.0, 7.0), step_voxels=0.5)
        assert np.diff(line.arclength).max() <= np.sqrt(3) + 1e-9

    def test_trapped(self):
        # a flat plateau of arrival times has no descent direction
        T = fast_march(ones(9), [(0.0, 0.0, 0.0)])
        flat = T.times.with_values(np.full((9, 9, 9), 5.0))
        with pytest.raises(TrappedBacktraceError, match="voxel"):
            backtrace_path(type(T)(flat, T.seeds), (8.0, 8.0, 8.0))


class TestCenterlineType:
    def test_too_short(self):
        with pytest.raises(GridError):
            Centerline(np.zeros((1, 3)))

    def test_repeated_point(self):
        with pytest.raises(GridError):
            Centerline(np.array([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]]))

    def test_csv_round_trip(self, tmp_path):
        line = Centerline(np.array([[0.0, 0, 0], [1.0, 0.5, 0], [2.0, 1.0, 0.25]]))
        line.to_csv(tmp_path / "c.csv")
        back = Centerline.from_csv(tmp_path / "c.csv")
        np.testing.assert_allclose(back.points, line.points, atol=1e-6)
        header = (tmp_path / "c.csv").read_text().splitlines()[0]
        assert header == "x,y,z,arclength"

    def test_seed_pair(self):
        with pytest.raises(GridError):
            SeedPair((1, 2, 3), (1, 2, 3))
        with pytest.raises(GridError):
            SeedPair((1, 2), (1, 2, 3))

    def test_smoothing_keeps_ends(self):
        rng = np.random.default_rng(0)
        pts = np.cumsum(rng.normal(size=(20, 3)), axis=0)
        out = smooth_polyline(pts, 5)
        np.testing.assert_array_equal(out[[0, -1]], pts[[0, -1]])
        np.testing.assert_allclose(out[5], pts[3:8].mean(axis=0))

    def test_config_validation(self):
        with pytest.raises(GridError):
            CenterlineConfig(fmm_order=3)
        with pytest.raises(GridError):
            CenterlineConfig(march_stop_factor=0.5)


@pytest.fixture(scope="module")
def straight_run(phantom):
    volume, truth = phantom("clean-straight")
    cfg = PipelineConfig()
    w = frangi_vesselness(volume, cfg.frangi)
    res = extract_centerline(volume, w, truth.seeds, cfg.thresholds, cfg.centerline,
                             return_details=True)
    return volume, truth, w, res


def test_straight_phantom_axis(straight_run):
    volume, truth, _, res = straight_run
    spec = recipe("clean-straight")
    _, dist = make_path(spec).project(res.centerline.points, 0.0, spec.length_mm)
    assert (dist / volume.spacing[0]).mean() <= 0.5


def test_centerline_spacing_and_ends(straight_run):
    volume, truth, _, res = straight_run
    line = res.centerline
    np.testing.assert_allclose(line.points[0], truth.seeds.start)
    np.testing.assert_allclose(line.points[-1], truth.seeds.end)
    diag = np.linalg.norm(volume.spacing)
    assert np.diff(line.arclength).max() <= diag


def test_swapped_seeds_reverse(straight_run):
    volume, truth, w, res = straight_run
    cfg = PipelineConfig()
    swapped = SeedPair(truth.seeds.end, truth.seeds.start)
    back = extract_centerline(volume, w, swapped, cfg.thresholds, cfg.centerline)
    fwd = res.centerline
    # compare at matching arclength fractions
    f = np.linspace(0, 1, 50)
    p = np.array([fwd.point_at(x * fwd.length) for x in f])
    q = np.array([back.point_at((1 - x) * back.length) for x in f])
    assert np.linalg.norm(p - q, axis=1).max() <= 0.5 * volume.spacing[0]


def test_path_cost_not_above_straight_segment(straight_run):
    _, truth, _, res = straight_run
    raw = backtrace_path(res.arrival, truth.seeds.end)
    straight = np.array([truth.seeds.start, truth.seeds.end])
    assert path_cost(res.speed, raw.points) <= path_cost(res.speed, straight) * 1.0001


@given(st.integers(0, 2**31 - 1))
def test_path_cost_minimality_random_speed(seed):
    rng = np.random.default_rng(seed)
    n = 12
    v = ndimage.gaussian_filter(rng.uniform(0.05, 1.0, size=(n, n, n)), 1.5)
    speed = VoxelGrid.from_array(np.clip(v, 1e-3, 1.0), kind="weight")
    a = tuple(float(x) for x in rng.integers(0, n, size=3))
    b = tuple(float(x) for x in rng.integers(0, n, size=3))
    if np.linalg.norm(np.subtract(a, b)) < 3:
        return
    line = backtrace_path(fast_march(speed, [a]), b)
    straight = np.array([a, b])
    # slack for the discretization error of the arrival times
    assert path_cost(speed, line.points) <= path_cost(speed, straight) * 1.05


def test_backtrace_with_seed_between_voxels():
    # the march starts from the nearest voxel centre; descent must still
    # terminate when the seed itself is off the lattice
    T = fast_march(ones(15), [(3.5, 3.5, 2.0)])
    line = backtrace_path(T, (3.5, 3.5, 12.0))
    np.testing.assert_allclose(line.points[0], (3.5, 3.5, 2.0))
    # times are measured from the snapped voxel, at most half a diagonal away
    assert 10.0 <= line.length <= 10.0 + np.sqrt(3) / 2 + 0.3


@pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (0.4, 0.4, 0.5)])
def test_backtrace_landing_on_seed(spacing):
    # seed on a voxel centre at a whole number of steps from the end: an RK
    # stage lands exactly on the seed, where the descent field is zero
    g = VoxelGrid.from_array(np.ones((9, 9, 40)), spacing)
    start = g.voxel_to_world((4, 4, 5))
    end = g.voxel_to_world((4, 4, 29))
    line = backtrace_path(fast_march(g, [start]), end)
    np.testing.assert_allclose(line.points[0], start)
    np.testing.assert_allclose(line.points[-1], end)
    assert line.length == pytest.approx(24 * spacing[2], rel=1e-6)
