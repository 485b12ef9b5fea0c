import numpy as np
import pytest
from sklearn.base import clone

from gtforge.errors import ConfigError, DataError, InsufficientDataError, NoOverlapError, SingularSystemError
from gtforge.geometry import PointCloud, Pose, transform_cloud, voxel_downsample
from gtforge.registration import (
    GicpRegistration,
    RegistrationTarget,
    RegParams,
    estimate_covariances,
    gicp_align,
    icp_align,
    incremental_odometry,
)
from gtforge.simulation import build_scene, simulate_spinning_scan, stop_and_go_script

from conftest import plane_cloud, random_pose


def pose_error(a: Pose, b: Pose):
    return a.distance_to(b), np.degrees(a.angle_to(b))


@pytest.fixture(scope="module")
def room_pair(room, coarse_os0):
    """Two independent noisy scans; the second taken from ``truth``."""
    truth = Pose.from_rotvec([0, 0, np.deg2rad(5.0)], [0.3, 0.0, 0.0])
    a = simulate_spinning_scan(room, Pose.identity(), coarse_os0, seed=1)
    b = simulate_spinning_scan(room, truth, coarse_os0, seed=2)
    return voxel_downsample(b, 0.2), voxel_downsample(a, 0.2), truth


# covariances ---------------------------------------------------------------


def test_raw_covariance_matches_brute_force():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(300, 3))
    reg, raw = estimate_covariances(pts, k=10, return_raw=True)
    for i in range(0, 300, 37):
        nn = np.argsort(np.linalg.norm(pts - pts[i], axis=1))[:10]
        np.testing.assert_allclose(raw[i], np.cov(pts[nn].T, ddof=1), atol=1e-12)


def test_regularized_covariance_is_a_plane_disk():
    rng = np.random.default_rng(1)
    c = plane_cloud(rng, n=800, noise=0.001)
    reg, raw = estimate_covariances(c, k=15, cov_epsilon=1e-3, return_raw=True)
    vals, vecs = np.linalg.eigh(reg)
    np.testing.assert_allclose(vals, np.tile([1e-3, 1, 1], (len(vals), 1)), atol=1e-12)
    interior = np.all(np.abs(c.points[:, :2]) < 1.5, axis=1)
    normals = vecs[interior, :, 0]
    assert np.min(np.abs(normals[:, 2])) > 0.99


def test_coincident_points_still_give_positive_definite_covariances():
    pts = np.vstack([np.zeros((25, 3)), np.random.default_rng(2).normal(size=(5, 3))])
    reg = estimate_covariances(pts, k=20)
    assert np.all(np.linalg.eigvalsh(reg) > 0)


def test_too_few_points_for_covariances():
    with pytest.raises(InsufficientDataError):
        estimate_covariances(np.eye(3), k=20)


# ICP / GICP ----------------------------------------------------------------


@pytest.mark.parametrize("method", [icp_align, gicp_align])
def test_fixed_point_is_identity(room_scan, method):
    c = voxel_downsample(room_scan, 0.3)
    res = method(c, c, Pose.identity())
    d, a = pose_error(res.pose, Pose.identity())
    assert d < 1e-6 and a < 1e-4
    assert res.fitness == pytest.approx(1.0)


def test_icp_recovers_small_transform(room_scan):
    src = voxel_downsample(room_scan, 0.2)
    T = Pose.from_rotvec([0, 0, np.deg2rad(1.0)], [0.05, -0.03, 0.02])
    tgt = transform_cloud(src, T)
    res = icp_align(src, tgt, Pose.identity(), RegParams(max_iterations=100, translation_eps=1e-7, rotation_eps=1e-7))
    d, a = pose_error(res.pose, T)
    assert d < 1e-3 and a < 0.1


def test_gicp_recovers_room_offset(room_pair):
    src, tgt, truth = room_pair
    res = gicp_align(src, tgt, Pose.identity())
    d, a = pose_error(res.pose, truth)
    assert d < 0.02 and a < 0.5
    assert res.converged


def test_gicp_cost_never_increases(room_pair):
    src, tgt, _ = room_pair
    res = gicp_align(src, tgt, Pose.identity())
    assert res.cost_history
    for before, after in res.cost_history:
        assert after <= before


def test_inlier_rmse_matches_independent_recomputation(room_pair):
    src, tgt, _ = room_pair
    params = RegParams()
    res = gicp_align(src, tgt, Pose.identity(), params)
    moved = res.pose.apply(src.points)
    d = np.concatenate(
        [np.min(np.linalg.norm(chunk[:, None] - tgt.points[None], axis=2), axis=1) for chunk in np.array_split(moved, 8)]
    )
    inl = d <= params.max_corr_dist
    assert res.fitness == pytest.approx(inl.mean(), abs=1e-12)
    assert res.inlier_rmse == pytest.approx(np.sqrt(np.mean(d[inl] ** 2)), abs=1e-9)


@pytest.mark.parametrize("method", [icp_align, gicp_align])
def test_registration_is_left_invariant(room_pair, method):
    src, tgt, truth = room_pair
    params = RegParams(translation_eps=1e-9, rotation_eps=1e-9, max_iterations=100)
    G = Pose.from_rotvec([0.3, -0.2, 1.0], [5.0, -2.0, 1.0])
    plain = method(src, tgt, Pose.identity(), params).pose
    moved = method(transform_cloud(src, G), transform_cloud(tgt, G), Pose.identity(), params).pose
    back = G.inverse() @ moved @ G
    assert back.distance_to(plain) < 1e-6
    assert back.angle_to(plain) < 1e-6


def test_plane_on_plane_is_degenerate():
    rng = np.random.default_rng(3)
    c = plane_cloud(rng, n=1500, size=6.0)
    shifted = transform_cloud(c, Pose(translation=[0.2, 0.1, 0.0]))
    with pytest.raises(SingularSystemError):
        gicp_align(shifted, c, Pose.identity())


@pytest.mark.parametrize("method", [icp_align, gicp_align])
def test_disjoint_clouds_raise_no_overlap(room_scan, method):
    c = voxel_downsample(room_scan, 0.5)
    far = transform_cloud(c, Pose(translation=[100.0, 0, 0]))
    with pytest.raises(NoOverlapError):
        method(far, c, Pose.identity())


def test_registration_target_is_reusable(room_pair):
    src, tgt, truth = room_pair
    target = RegistrationTarget(tgt)
    r1 = gicp_align(src, target, Pose.identity())
    r2 = gicp_align(src, target, Pose.identity())
    np.testing.assert_array_equal(r1.pose.matrix(), r2.pose.matrix())


def test_gicp_estimator(room_pair):
    src, tgt, truth = room_pair
    est = GicpRegistration(max_corr_dist=1.0)
    assert clone(est).get_params()["method"] == "gicp"
    est.fit(src.points, tgt.points)
    assert est.pose_.distance_to(truth) < 0.02
    np.testing.assert_allclose(est.transform(src.points), est.pose_.apply(src.points))
    assert GicpRegistration(method="icp").fit(tgt.points, tgt.points).result_.fitness == 1.0
    with pytest.raises(ConfigError):
        GicpRegistration(method="ndt").fit(src.points, tgt.points)


def test_reg_params_validation():
    with pytest.raises(ConfigError):
        RegParams(max_corr_dist=0)
    with pytest.raises(ConfigError):
        RegParams(k_neighbors=0)


# odometry ------------------------------------------------------------------


def test_single_scan_odometry_is_identity(room_scan):
    traj = incremental_odometry([room_scan])
    assert len(traj) == 1
    np.testing.assert_array_equal(traj[0].matrix(), np.eye(4))


def test_stationary_odometry_stays_put(room, coarse_os0):
    scans = [simulate_spinning_scan(room, Pose.identity(), coarse_os0, seed=5, frame_index=k, stamp=0.1 * k) for k in range(10)]
    traj = incremental_odometry(scans)
    assert np.max(np.linalg.norm(traj.translations, axis=1)) < 0.02
    assert not traj.degraded.any()


def test_corridor_odometry_drift_is_small(coarse_os0):
    scene = build_scene("corridor_40m")
    script = stop_and_go_script([(10.0, 0.0, 0.0, 0.0)], stop_duration=0.0, speed=1.0, start_stop=0.0)
    stamps = np.arange(0, 101) * 0.1
    scans = [simulate_spinning_scan(scene, script.pose_at(t), coarse_os0, seed=6, frame_index=k, stamp=t) for k, t in enumerate(stamps)]
    traj = incremental_odometry(scans)
    end_err = np.linalg.norm(traj.translations[-1] - script.pose_at(stamps[-1]).translation)
    assert end_err < 0.02 * 10.0


def test_odometry_rejects_unordered_scans(room_scan):
    a = PointCloud(room_scan.points, stamp=1.0)
    b = PointCloud(room_scan.points, stamp=0.5)
    with pytest.raises(DataError):
        incremental_odometry([a, b])


def test_odometry_flags_failed_scans(room_scan):
    far = PointCloud(room_scan.points + [500.0, 0, 0], stamp=0.1)
    traj = incremental_odometry([room_scan, far])
    assert traj.degraded.tolist() == [False, True]
