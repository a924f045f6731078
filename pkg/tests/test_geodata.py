import io
import math

import numpy as np
import pytest

from kinodiff import geodata as gd
from kinodiff.engine import Rng
from kinodiff.geodata import (CanonicalTraj, GeoError, Normalizer, ParseError,
                              Trajectory, denormalize, derive_kinematics,
                              neighbor_query, normalize, parse, resample,
                              split_on_gaps, write_canonical)
from kinodiff.kbm import generate_normal

AIS_HEADER = "MMSI,BaseDateTime,LAT,LON,SOG,COG\n"


def make_traj(lat, lon, t, v=None, tid="t0"):
    return Trajectory(id=tid, lat=np.asarray(lat, float), lon=np.asarray(lon, float),
                      t=np.asarray(t, float), v=None if v is None else np.asarray(v, float))


class TestParse:
    def test_ais_invalid_row_dropped(self):
        text = AIS_HEADER + (
            "123,2023-05-01T00:00:00,10.0,20.0,4.0,90\n"
            "123,2023-05-01T00:01:00,999.0,20.0,4.0,90\n"
            "123,2023-05-01T00:02:00,10.01,20.0,4.0,90\n")
        res = parse("ais-csv", text)
        assert len(res) == 1
        assert len(res.trajectories[0]) == 2
        assert res.dropped_invalid == 1

    def test_ais_sog_converted_to_mps(self):
        text = AIS_HEADER + (
            "9,2023-05-01T00:00:00,1.0,2.0,10.0,0\n"
            "9,2023-05-01T00:01:00,1.001,2.0,10.0,0\n")
        traj = parse("ais-csv", text).trajectories[0]
        assert traj.v[0] == pytest.approx(10.0 * 0.514444)

    def test_ais_rows_sorted_by_time(self):
        text = AIS_HEADER + (
            "9,2023-05-01T00:02:00,1.002,2.0,4.0,0\n"
            "9,2023-05-01T00:00:00,1.0,2.0,4.0,0\n"
            "9,2023-05-01T00:01:00,1.001,2.0,4.0,0\n")
        traj = parse("ais-csv", text).trajectories[0]
        assert np.all(np.diff(traj.t) > 0)
        assert traj.lat[0] == 1.0

    def test_duplicate_timestamps_dropped_with_warning(self):
        text = AIS_HEADER + (
            "9,2023-05-01T00:00:00,1.0,2.0,4.0,0\n"
            "9,2023-05-01T00:00:00,1.5,2.0,4.0,0\n"
            "9,2023-05-01T00:01:00,1.001,2.0,4.0,0\n")
        with pytest.warns(UserWarning, match="duplicate"):
            res = parse("ais-csv", text)
        assert res.dropped_duplicate == 1
        assert len(res.trajectories[0]) == 2

    def test_canonical_round_trip(self):
        t1 = make_traj([1.0, 1.001, 1.002], [2.0, 2.0, 2.0005],
                       [0.0, 60.0, 120.0], v=[3.0, 3.1, 3.2], tid="a")
        t2 = make_traj([5.0, 5.01], [6.0, 6.01], [10.0, 70.0], tid="b")
        text = write_canonical([t1, t2])
        back = parse("canonical", text).trajectories
        assert [b.id for b in back] == ["a", "b"]
        np.testing.assert_array_equal(back[0].lat, t1.lat)
        np.testing.assert_array_equal(back[0].t, t1.t)
        np.testing.assert_array_equal(back[0].v, t1.v)
        assert back[1].v is None
        # serialization is idempotent byte for byte
        assert write_canonical(back) == text

    def test_geolife_plt_one_hz(self):
        header = "\n".join(["Geolife trajectory", "WGS 84", "Altitude is in Feet",
                            "Reserved 3", "0,2,255,My Track,0,0,2,8421376", "0"])
        rows = "\n".join(
            f"39.9{i},116.3,0,492,39744.120{i},2008-10-23,02:53:0{i}" for i in range(5))
        res = parse("geolife-plt", header + "\n" + rows)
        traj = res.trajectories[0]
        assert len(traj) == 5
        np.testing.assert_allclose(np.diff(traj.t), 1.0)

    def test_unknown_format(self):
        with pytest.raises(ParseError, match="format"):
            parse("gpx", "whatever")

    def test_zero_valid_rows(self):
        with pytest.raises(ParseError):
            parse("ais-csv", AIS_HEADER + "9,not-a-date,999,999,x,0\n")


class TestDeriveKinematics:
    def test_one_degree_north_at_equator(self):
        traj = make_traj([0.0, 1.0], [0.0, 0.0], [0.0, 1000.0])
        d = derive_kinematics(traj)
        assert d.v[0] == pytest.approx(111.32, abs=0.01)
        assert d.psi[0] == pytest.approx(0.0, abs=1e-12)

    def test_due_east_bearing(self):
        traj = make_traj([0.0, 0.0], [0.0, 0.5], [0.0, 100.0])
        d = derive_kinematics(traj)
        assert d.psi[0] == pytest.approx(math.pi / 2, abs=1e-9)

    def test_constant_velocity_line_zero_higher_derivatives(self):
        lat = np.linspace(0.0, 0.01, 6)
        traj = make_traj(lat, np.zeros(6), np.arange(6.0) * 10.0)
        d = derive_kinematics(traj)
        np.testing.assert_allclose(d.a, 0.0, atol=1e-9)
        np.testing.assert_allclose(d.jerk, 0.0, atol=1e-10)
        np.testing.assert_allclose(d.kappa, 0.0, atol=1e-12)

    def test_observed_speed_is_kept(self):
        traj = make_traj([0.0, 0.001], [0.0, 0.0], [0.0, 10.0], v=[42.0, 42.0])
        d = derive_kinematics(traj)
        np.testing.assert_array_equal(d.v, [42.0, 42.0])

    def test_short_trajectories_skip_higher_orders(self):
        d = derive_kinematics(make_traj([0.0, 0.001], [0.0, 0.0], [0.0, 10.0]))
        assert d.v is not None and d.psi is not None
        assert d.a is None and d.kappa is None and d.jerk is None


class TestResample:
    def test_identity_on_uniform_knots(self):
        traj = make_traj(np.linspace(0, 0.01, 7), np.linspace(0, 0.02, 7),
                         np.arange(7.0))
        r = resample(traj, 7)
        np.testing.assert_allclose(r.lat, traj.lat, atol=1e-12)
        np.testing.assert_allclose(r.lon, traj.lon, atol=1e-12)
        np.testing.assert_allclose(r.t, traj.t, atol=1e-12)

    def test_two_point_segment_collinear_quarters(self):
        traj = make_traj([0.0, 0.04], [0.0, 0.08], [0.0, 4.0])
        r = resample(traj, 5)
        np.testing.assert_allclose(r.lat, [0.0, 0.01, 0.02, 0.03, 0.04], atol=1e-15)
        np.testing.assert_allclose(r.lon, [0.0, 0.02, 0.04, 0.06, 0.08], atol=1e-15)

    def test_sine_path_against_dense_oracle(self):
        # piecewise-linear resampling of a smooth path stays within the
        # worst-case chord deviation bound |f''| h^2 / 8 of the dense curve
        t_knots = np.linspace(0.0, 100.0, 51)
        lat = 0.01 * np.sin(0.05 * t_knots)
        lon = 0.0002 * t_knots
        traj = make_traj(lat, lon, t_knots)
        r = resample(traj, 180)
        dense_lat = 0.01 * np.sin(0.05 * r.t)
        h = t_knots[1] - t_knots[0]
        bound = 0.01 * 0.05 ** 2 * h ** 2 / 8.0
        assert np.max(np.abs(r.lat - dense_lat)) <= bound * 1.0001

    def test_endpoints_exact(self):
        traj = make_traj([1.0, 1.5, 1.7], [2.0, 2.2, 2.9], [0.0, 3.0, 11.0])
        r = resample(traj, 64)
        assert r.lat[0] == traj.lat[0] and r.lat[-1] == traj.lat[-1]
        assert r.t[0] == traj.t[0] and r.t[-1] == traj.t[-1]

    def test_n_too_small(self):
        with pytest.raises(GeoError):
            resample(make_traj([0, 0.1], [0, 0.1], [0, 1]), 1)

    def test_monotone_time_preserved(self):
        traj = make_traj([0, 0.01, 0.03], [0, 0.01, 0.02], [0.0, 5.0, 6.0])
        r = resample(traj, 50)
        assert np.all(np.diff(r.t) > 0)


class TestSplitOnGaps:
    def test_no_gap_returns_original(self):
        traj = make_traj([0, 0.001, 0.002], [0, 0, 0], [0.0, 1.0, 2.0])
        segs = split_on_gaps(traj)
        assert len(segs) == 1 and segs[0] is traj

    def test_long_gap_splits(self):
        t = np.array([0.0, 1.0, 2.0, 3.0, 100.0, 101.0, 102.0])
        traj = make_traj(np.linspace(0, 0.006, 7), np.zeros(7), t)
        segs = split_on_gaps(traj, factor=10.0)
        assert len(segs) == 2
        assert len(segs[0]) == 4 and len(segs[1]) == 3
        assert segs[0].id != segs[1].id


class TestNormalize:
    def _fitted(self, seed=0, n_trajs=4):
        rng = Rng(seed)
        trajs = [derive_kinematics(resample(
            generate_normal(rng.derive(i), n=60, dt=1.0, traj_id=f"g{i}"), 60))
            for i in range(n_trajs)]
        return trajs, Normalizer.fit(trajs)

    def test_minmax_midpoint_maps_to_zero(self):
        raw = np.array([[0.0, 0.0, 0.0, 0.0], [10.0, 10.0, 10.0, 10.0]])
        norm = Normalizer(mode="minmax", lat0=0.0, lon0=0.0,
                          center=np.zeros(4), scale=np.full(4, 10.0))
        out = norm.transform(np.array([[5.0, 5.0, 5.0, 5.0]]))
        np.testing.assert_allclose(out, 0.0)
        np.testing.assert_allclose(norm.transform(raw), [[-1.0] * 4, [1.0] * 4])

    def test_round_trip_identity(self):
        trajs, norm = self._fitted()
        for traj in trajs:
            canon = normalize(traj, norm)
            back = denormalize(canon)
            np.testing.assert_allclose(back.lat, traj.lat, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(back.lon, traj.lon, rtol=1e-9, atol=1e-12)
            np.testing.assert_allclose(back.v, traj.v, rtol=1e-9)
            np.testing.assert_allclose(back.t, traj.t, rtol=0, atol=1e-7)
            # and normalize(denormalize(.)) is the identity in feature space
            again = normalize(derive_kinematics(back), norm)
            np.testing.assert_allclose(again.features[:, :3], canon.features[:, :3],
                                       atol=1e-6)

    def test_minmax_features_in_unit_box(self):
        trajs, norm = self._fitted(seed=3)
        for traj in trajs:
            f = normalize(traj, norm).features
            assert f.min() >= -1.0 - 1e-12 and f.max() <= 1.0 + 1e-12

    def test_projection_scales_with_cos_lat(self):
        x60, _ = gd.project_xy(60.0, 1.0, 60.0, 0.0)
        x0, _ = gd.project_xy(0.0, 1.0, 0.0, 0.0)
        assert x60 / x0 == pytest.approx(math.cos(math.radians(60.0)), rel=1e-12)

    def test_constant_feature_warns_and_maps_to_zero(self):
        lat = np.linspace(0, 0.01, 10)
        # due-north tracks at identical constant speed: v and psi constant
        trajs = [derive_kinematics(make_traj(lat, np.full(10, 0.001 * i),
                                             np.arange(10.0), tid=f"c{i}"))
                 for i in range(3)]
        with pytest.warns(UserWarning, match="constant"):
            norm = Normalizer.fit(trajs)
        canon = normalize(trajs[0], norm)
        np.testing.assert_allclose(canon.features[:, 3], 0.0)

    def test_non_uniform_rejected(self):
        traj = derive_kinematics(make_traj([0, 0.001, 0.002], [0, 0, 0],
                                           [0.0, 1.0, 3.0]))
        _, norm = self._fitted()
        with pytest.raises(GeoError, match="uniform"):
            normalize(traj, norm)

    def test_zscore_round_trip(self):
        trajs, _ = self._fitted(seed=5)
        norm = Normalizer.fit(trajs, mode="zscore")
        canon = normalize(trajs[0], norm)
        back = denormalize(canon)
        np.testing.assert_allclose(back.lat, trajs[0].lat, rtol=1e-9, atol=1e-12)


class TestKbmRecovery:
    def test_derive_recovers_integrator_kinematics(self):
        # derived speed within 1% and heading within 0.01 rad at dt <= 1
        for seed in range(10):
            gen = generate_normal(Rng(seed), n=120, dt=1.0, traj_id=f"g{seed}")
            bare = make_traj(gen.lat, gen.lon, gen.t, tid=gen.id)
            d = derive_kinematics(bare)
            rel_v = np.abs(d.v[:-1] - gen.v[:-1]) / gen.v[:-1]
            dpsi = np.abs(gd.wrap_angle(d.psi[:-1] - gen.psi[:-1]))
            assert rel_v.max() < 0.01
            assert dpsi.max() < 0.01


class TestNeighborQuery:
    def _parallel(self, offsets, n=30, tid_prefix="p"):
        trajs = []
        for i, off in enumerate(offsets):
            lat = np.linspace(0.0, 0.003, n)
            lon = np.full(n, off / 111319.49)  # meters east -> degrees
            trajs.append(derive_kinematics(
                make_traj(lat, lon, np.arange(n, dtype=float), tid=f"{tid_prefix}{i}")))
        return trajs

    def test_lone_target_has_empty_context(self):
        trajs = self._parallel([0.0])
        ctx = neighbor_query(trajs, trajs[0], k=3, radius_m=100.0)
        assert ctx.k == 0
        assert ctx.features.shape == (0, 30, 4)

    def test_single_candidate_within_radius(self):
        trajs = self._parallel([0.0, 10.0])
        ctx = neighbor_query(trajs, trajs[0], k=1, radius_m=100.0)
        assert ctx.neighbor_ids == ["p1"]
        np.testing.assert_array_equal(ctx.mask, 1.0)

    def test_radius_excludes(self):
        trajs = self._parallel([0.0, 500.0])
        ctx = neighbor_query(trajs, trajs[0], k=1, radius_m=100.0)
        assert ctx.k == 0

    def test_order_matches_brute_force(self):
        offsets = [0.0, 40.0, 10.0, 30.0, 20.0]
        trajs = self._parallel(offsets)
        ctx = neighbor_query(trajs, trajs[0], k=4, radius_m=1000.0)
        assert ctx.neighbor_ids == ["p2", "p4", "p3", "p1"]
        # brute-force oracle: sort others by mean planar distance, then id
        dists = sorted((abs(off), f"p{i}") for i, off in enumerate(offsets) if i != 0)
        assert ctx.neighbor_ids == [tid for _, tid in dists]

    def test_tie_broken_by_id(self):
        trajs = self._parallel([0.0, 25.0, 25.0, 25.0])
        ctx = neighbor_query(trajs, trajs[0], k=2, radius_m=1000.0)
        assert ctx.neighbor_ids == ["p1", "p2"]

    def test_partial_overlap_masked(self):
        n = 30
        full = self._parallel([0.0], n=n)[0]
        lat = np.linspace(0.0015, 0.003, 15)
        late = derive_kinematics(make_traj(
            lat, np.full(15, 10.0 / 111319.49), np.arange(15, 30, dtype=float), tid="late"))
        ctx = neighbor_query([full, late], full, k=1, radius_m=1000.0)
        assert ctx.neighbor_ids == ["late"]
        assert ctx.mask[0, :15].sum() == 0
        assert ctx.mask[0, 15:].sum() == 15
        np.testing.assert_array_equal(ctx.features[0, :15], 0.0)
