import os

import numpy as np
import pytest

from gtforge.errors import ConfigError, DataError, NoDataError, ZeroSegmentsError
from gtforge.geometry import PointCloud, Pose, transform_cloud, voxel_downsample
from gtforge.pipeline import (
    ImuStream,
    PipelineConfig,
    PriorMap,
    StationaryThresholds,
    Submap,
    SubmapCache,
    build_prior_map,
    denoise_map,
    detect_stationary_segments,
    generate_ground_truth,
    integrate_submap,
    read_imu_csv,
    run_pipeline,
    write_imu_csv,
)
from gtforge.simulation import (
    build_scene,
    export_dataset,
    sensor_preset,
    simulate_dataset,
    simulate_solid_state_scan,
    stop_and_go_script,
    synthesize_imu,
)
from gtforge.trajectory import read_tum, write_tum


def imu_stream(duration, accel=(0.0, 0.0, 9.81), rate=200.0):
    t = np.arange(int(duration * rate) + 1) / rate
    return ImuStream(t, np.tile(accel, (len(t), 1)), np.zeros((len(t), 3)))


@pytest.fixture(scope="module")
def avia():
    return sensor_preset("avia")


@pytest.fixture(scope="module")
def avia_frames(room, avia):
    return [simulate_solid_state_scan(room, Pose.identity(), avia, frame_time=0.1 * k, seed=1) for k in range(10)]


# stationary gating ---------------------------------------------------------


def test_constant_imu_is_one_segment():
    segs = detect_stationary_segments(imu_stream(5.0))
    assert segs == [(0.0, 5.0)]


def test_shaking_imu_has_no_segments():
    imu = imu_stream(5.0)
    shake = np.where(np.arange(len(imu)) % 2 == 0, 0.5, -0.5)
    acc = imu.accel + shake[:, None]
    assert detect_stationary_segments(ImuStream(imu.t, acc, imu.gyro)) == []


def test_short_still_runs_are_dropped():
    imu = imu_stream(3.0)
    gyro = imu.gyro.copy()
    gyro[(imu.t > 0.8) & (imu.t < 1.2), 2] = 0.1
    segs = detect_stationary_segments(ImuStream(imu.t, imu.accel, gyro), th=StationaryThresholds(min_duration=1.5))
    assert len(segs) == 1 and segs[0][0] > 1.0 and segs[0][1] == 3.0


def test_stop_and_go_windows_match_the_schedule():
    script = stop_and_go_script(
        [(2.0, 0.0, 0.0, 0.0), (2.0, 2.0, 0.0, 45.0), (4.0, 2.0, 0.1, 45.0)], stop_duration=2.0, speed=0.5
    )
    rate = 200.0
    imu = synthesize_imu(script, rate=rate, seed=3)
    odom = script.trajectory(np.arange(0, script.end + 1e-9, 0.1))
    segs = detect_stationary_segments(imu, odom)
    truth = script.stop_windows
    assert len(segs) == len(truth)
    for (a, b), (ta, tb) in zip(segs, truth):
        assert abs(a - ta) <= 1.0 / rate + 1e-9
        assert abs(b - tb) <= 1.0 / rate + 1e-9


def test_constant_velocity_needs_the_odometry_check():
    script = stop_and_go_script([(5.0, 0.0, 0.0, 0.0)], stop_duration=0.0, speed=1.0, start_stop=0.0)
    imu = synthesize_imu(script, noise_accel=0.0, noise_gyro=0.0)
    assert detect_stationary_segments(imu) != []
    odom = script.trajectory(np.arange(0, 5.01, 0.1))
    assert detect_stationary_segments(imu, odom) == []


def test_gating_input_errors():
    imu = imu_stream(1.0)
    with pytest.raises(DataError):
        detect_stationary_segments(ImuStream(imu.t[::-1], imu.accel, imu.gyro))
    with pytest.raises(NoDataError):
        detect_stationary_segments(ImuStream(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))))
    with pytest.raises(ConfigError):
        StationaryThresholds(gyro_max=0.0)


def test_imu_csv_round_trip(tmp_path):
    imu = synthesize_imu(stop_and_go_script([(1.0, 0.0, 0.0, 30.0)]), seed=2)
    write_imu_csv(tmp_path / "imu.csv", imu)
    back = read_imu_csv(tmp_path / "imu.csv")
    for name in ("t", "accel", "gyro"):
        np.testing.assert_array_equal(getattr(back, name), getattr(imu, name))


# submaps -------------------------------------------------------------------


def test_ten_avia_frames_make_a_dense_submap(avia_frames):
    sm = integrate_submap(avia_frames)
    assert len(sm.cloud) >= 240_000
    assert sm.frame_count == 10
    assert (sm.t_start, sm.t_end) == (0.0, pytest.approx(0.9))


def test_single_frame_submap_is_the_frame(avia_frames):
    sm = integrate_submap(avia_frames[:1])
    np.testing.assert_array_equal(sm.cloud.points, avia_frames[0].points)
    assert sm.frame_count == 1
    with pytest.raises(NoDataError):
        integrate_submap([])


def test_integration_grows_coverage(avia_frames):
    def occupied(c):
        return len(np.unique(np.floor(c.points / 0.05).astype(np.int64), axis=0))

    counts = [occupied(integrate_submap(avia_frames[:n]).cloud) for n in (1, 2, 5, 10)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_submap_cache_order():
    c = PointCloud(np.zeros((1, 3)))
    cache = SubmapCache([Submap(c, Pose.identity(), 1, 0.0, 1.0)])
    cache.append(Submap(c, Pose.identity(), 1, 2.0, 3.0))
    with pytest.raises(DataError):
        cache.append(Submap(c, Pose.identity(), 1, 2.5, 4.0))
    assert len(cache) == 2
    cache.clear()
    assert len(cache) == 0


# prior map -----------------------------------------------------------------


def test_single_submap_map_is_its_transform(avia_frames):
    pose = Pose.from_rotvec([0, 0, 0.3], [1.0, 2.0, 0.0])
    sm = integrate_submap(avia_frames[:2], pose)
    prior = build_prior_map([sm])
    np.testing.assert_array_equal(prior.cloud.points, transform_cloud(sm.cloud, pose).points)
    assert prior.submap_count == 1 and prior.merge_report[0]["status"] == "seed"
    with pytest.raises(NoDataError):
        build_prior_map([])


def _view_submap(room, avia, truth, t0, guess=None):
    frames = [simulate_solid_state_scan(room, truth, avia, t0 + 0.1 * k, seed=2) for k in range(10)]
    return integrate_submap(frames, guess or truth)


def test_two_perturbed_submaps_merge_onto_the_surface(room, avia):
    # both views share the far wall, the y = -3 wall, floor and ceiling
    truth = Pose.from_rotvec([0, 0, np.deg2rad(-20)], [1.5, 0.5, 0.0])
    guess = truth @ Pose.from_rotvec([0, 0, np.deg2rad(3.0)], [0.2, -0.2, 0.1])
    prior = build_prior_map([_view_submap(room, avia, Pose.identity(), 0.0), _view_submap(room, avia, truth, 10.0, guess)])
    assert [e["status"] for e in prior.merge_report] == ["seed", "merged"]
    entry = prior.merge_report[1]
    assert entry["registration"]["inlier_rmse"] <= entry["registration"]["initial_rmse"]
    rms = np.sqrt(np.mean(room.distance(prior.cloud.points) ** 2))
    assert rms <= 0.02


def test_underconstrained_overlap_is_not_merged(room, avia):
    # the only shared surfaces are the far wall, floor and ceiling: y slides freely
    truth = Pose.from_rotvec([0, 0, np.deg2rad(40)], [2.0, 1.0, 0.0])
    guess = truth @ Pose.from_rotvec([0, 0, np.deg2rad(3.0)], [0.2, -0.2, 0.1])
    seed = _view_submap(room, avia, Pose.identity(), 0.0)
    prior = build_prior_map([seed, _view_submap(room, avia, truth, 10.0, guess)])
    assert prior.merge_report[1]["status"] in ("rejected", "skipped")
    assert prior.submap_count == 1
    assert len(prior.cloud) == len(seed.cloud)


def test_disjoint_submap_is_skipped(avia_frames):
    first = integrate_submap(avia_frames[:2])
    far = integrate_submap([PointCloud(f.points, f.stamp + 5.0) for f in avia_frames[:2]], Pose(translation=[500.0, 0, 0]))
    prior = build_prior_map([first, far])
    assert prior.merge_report[1]["status"] == "skipped"
    assert prior.merge_report[1]["error"] == "no_overlap"
    assert prior.submap_count == 1
    assert len(prior.cloud) == len(first.cloud)


def test_denoise_removes_injected_noise(room, avia_frames):
    clean = voxel_downsample(integrate_submap(avia_frames).cloud, 0.05)
    rng = np.random.default_rng(4)
    noise = rng.uniform([-3, -3, -1.2], [7, 5, 1.8], size=(20 * len(clean) // 100, 3))
    noise = noise[room.distance(noise) > 0.5][: len(clean) // 100]
    assert len(noise) == len(clean) // 100
    cfg = PipelineConfig()
    out = denoise_map(PriorMap(PointCloud(np.vstack([clean.points, noise])), 1, []), cfg)
    kept = {tuple(p) for p in out.cloud.points.tolist()}
    removed_noise = sum(tuple(p) not in kept for p in noise.tolist())
    assert removed_noise >= 0.9 * len(noise)
    assert len(out.cloud) <= len(clean) + len(noise)
    only_clean = denoise_map(PriorMap(clean, 1, []), cfg)
    assert only_clean.denoise_removed <= 0.01 * len(clean)


def test_denoise_tiny_map_is_unchanged(caplog):
    m = PriorMap(PointCloud(np.eye(3)), 1, [])
    out = denoise_map(m)
    assert out.denoise_skipped and out.denoise_removed == 0
    np.testing.assert_array_equal(out.cloud.points, m.cloud.points)
    assert "denoise skipped" in caplog.text


# configuration -------------------------------------------------------------


def test_config_round_trip_and_strictness():
    cfg = PipelineConfig.from_dict({"thresholds": {"gyro_max": 0.02}, "map_leaf": 0.1, "solid_extrinsic": {"translation": [0.1, 0, 0], "rotation_wxyz": [1, 0, 0, 0]}})
    assert cfg.thresholds.gyro_max == 0.02 and cfg.map_leaf == 0.1
    assert PipelineConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    for bad in ({"bogus": 1}, {"ndt": {"cell": 1.0}}, {"map_leaf": -1.0}, {"thresholds": []}, {"ndt": {"outlier_ratio": 1.5}}):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(bad)


# end to end ----------------------------------------------------------------


@pytest.fixture(scope="module")
def stationary_run(room, coarse_os0, avia):
    script = stop_and_go_script([], stop_duration=0.0, start_stop=4.0)
    ds = simulate_dataset(room, script, coarse_os0, avia, seed=8)
    cfg = PipelineConfig(solid_extrinsic=ds.solid_extrinsic)
    return ds, cfg, run_pipeline(ds.spinning, ds.solid, ds.imu, cfg)


def test_stationary_ground_truth_is_tight(stationary_run):
    ds, cfg, res = stationary_run
    assert len(res.segments) == 1
    assert np.all(np.std(res.ground_truth.translations, axis=0) <= 0.05)
    np.testing.assert_array_equal(res.ground_truth.stamps, [c.stamp for c in ds.spinning])


def test_pipeline_is_deterministic(stationary_run):
    ds, cfg, res = stationary_run
    again = run_pipeline(ds.spinning, ds.solid, ds.imu, cfg)
    np.testing.assert_array_equal(again.prior_map.cloud.points, res.prior_map.cloud.points)
    np.testing.assert_array_equal(again.ground_truth.translations, res.ground_truth.translations)
    np.testing.assert_array_equal(again.ground_truth.rotations, res.ground_truth.rotations)
    assert again.report == res.report


def test_corridor_dataset_with_four_stops(tmp_path, coarse_os0):
    corridor = build_scene("corridor_40m")
    script = stop_and_go_script([(4.0, 0, 0, 0), (8.0, 0, 0, 0), (12.0, 0, 0, 0)], stop_duration=1.5, speed=1.0)
    data = tmp_path / "corridor"
    export_dataset(corridor, script, coarse_os0, sensor_preset("avia"), seed=9, out_dir=str(data))
    # external odometry: the simulator truth
    write_tum(data / "odometry.tum", read_tum(data / "truth.tum"))
    res = generate_ground_truth(str(data), PipelineConfig(), str(tmp_path / "out"))
    assert len(res.segments) == 4
    assert len(res.prior_map.merge_report) == 4
    assert res.report["odometry"]["source"] == "external"
    gt = read_tum(tmp_path / "out" / "ground_truth.tum")
    truth = read_tum(data / "truth.tum")
    np.testing.assert_array_equal(gt.stamps, truth.stamps)
    assert np.all(np.diff(gt.stamps) > 0)
    assert np.max(np.linalg.norm(gt.translations - truth.translations, axis=1)) < 0.1
    for name in ("prior_map.pcd", "ground_truth.tum", "report.json", "timing.json"):
        assert os.path.exists(tmp_path / "out" / name)


def test_moving_without_stops_raises(tmp_path, room, coarse_os0):
    script = stop_and_go_script([(2.0, 0, 0, 0), (2.0, 1.0, 0, 0)], stop_duration=0.0, start_stop=0.0, speed=1.0)
    export_dataset(room, script, coarse_os0, sensor_preset("avia"), seed=1, out_dir=str(tmp_path))
    write_tum(tmp_path / "odometry.tum", read_tum(tmp_path / "truth.tum"))
    with pytest.raises(ZeroSegmentsError):
        generate_ground_truth(str(tmp_path))
