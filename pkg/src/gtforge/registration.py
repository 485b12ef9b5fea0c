"""Point-to-point ICP, Generalized ICP and a scan-to-map GICP odometry.

Pose increments are 6-vectors ``(dx, dy, dz, rx, ry, rz)`` applied on the
left: ``R <- Exp(r) R``, ``t <- Exp(r) t + d``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError, DataError, InsufficientDataError, NoDataError, NoOverlapError, SingularSystemError
from .geometry import (
    PointCloud,
    Pose,
    SpatialIndex,
    check_points,
    kabsch,
    so3_exp,
    transform_cloud,
    voxel_downsample,
)
from .trajectory import Trajectory

log = logging.getLogger(__name__)

# smallest admissible eigenvalue ratio of the scale-normalized point-to-plane information
DEGENERACY_RATIO = 1e-6
MAX_HALVINGS = 8


@dataclass(frozen=True)
class RegParams:
    max_corr_dist: float = 1.0
    max_iterations: int = 50
    translation_eps: float = 1e-4
    rotation_eps: float = 1e-4
    k_neighbors: int = 20
    cov_epsilon: float = 1e-3

    def __post_init__(self):
        for name in ("max_corr_dist", "translation_eps", "rotation_eps", "cov_epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"RegParams.{name} must be positive")
        if int(self.max_iterations) < 1 or int(self.k_neighbors) < 1:
            raise ConfigError("RegParams.max_iterations and k_neighbors must be >= 1")


@dataclass
class RegResult:
    """Outcome of one alignment; ``pose`` is target-from-source."""

    pose: Pose
    fitness: float
    inlier_rmse: float
    iterations: int
    converged: bool
    initial_fitness: float = 0.0
    initial_rmse: float = 0.0
    # (cost before, cost after) of each accepted step, same correspondences
    cost_history: list = field(default_factory=list)

    def summary(self):
        return {
            "pose": {
                "translation": [float(v) for v in self.pose.translation],
                "rotation_wxyz": [float(v) for v in self.pose.rotation],
            },
            "fitness": float(self.fitness),
            "inlier_rmse": float(self.inlier_rmse),
            "initial_fitness": float(self.initial_fitness),
            "initial_rmse": float(self.initial_rmse),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def apply_increment(R, t, delta):
    dR = so3_exp(delta[3:])
    return dR @ R, dR @ t + delta[:3]


def _as_points(c):
    if isinstance(c, PointCloud):
        return c.points
    return check_points(c)


def _knn_covariances(points, nbr_index):
    nb = points[nbr_index]  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    k = nb.shape[1]
    return np.einsum("nki,nkj->nij", centered, centered) / max(k - 1, 1)


def _local_frames(pts, k):
    if len(pts) < k + 1:
        raise InsufficientDataError(f"need at least {k + 1} points for covariance estimation, got {len(pts)}")
    _, nbr = SpatialIndex(pts).query(pts, k=k)
    raw = _knn_covariances(pts, nbr.reshape(len(pts), -1))
    _, vecs = np.linalg.eigh(raw)  # ascending eigenvalues
    return raw, vecs


def _regularize(vecs, cov_epsilon):
    scales = np.array([cov_epsilon, 1.0, 1.0])
    reg = np.einsum("nij,j,nkj->nik", vecs, scales, vecs)
    return 0.5 * (reg + reg.transpose(0, 2, 1))


def estimate_covariances(c, k=20, cov_epsilon=1e-3, return_raw=False):
    """Plane-regularized per-point covariances for GICP.

    The raw covariance of a point is the sample covariance (``1/(k-1)``) of
    its ``k`` nearest neighbours, the point itself included. Its eigenvalues
    are then replaced by ``(1, 1, cov_epsilon)`` in the same eigenbasis,
    the smallest going to the surface normal.
    """
    raw, vecs = _local_frames(_as_points(c), k)
    reg = _regularize(vecs, cov_epsilon)
    return (reg, raw) if return_raw else reg


class RegistrationTarget:
    """A target cloud with its k-d tree and (lazily) its GICP covariances."""

    def __init__(self, cloud, params: RegParams | None = None):
        self.params = params or RegParams()
        self.points = _as_points(cloud)
        if len(self.points) == 0:
            raise NoDataError("registration target is empty")
        self.index = SpatialIndex(self.points)
        self._cov = None
        self._normals = None

    def _estimate(self):
        _, vecs = _local_frames(self.points, self.params.k_neighbors)
        self._cov = _regularize(vecs, self.params.cov_epsilon)
        self._normals = vecs[:, :, 0]

    @property
    def covariances(self):
        if self._cov is None:
            self._estimate()
        return self._cov

    @property
    def normals(self):
        if self._normals is None:
            self._estimate()
        return self._normals


def _correspondences(target, moved, max_dist):
    d, j = target.index.query(moved, k=1, distance_upper_bound=max_dist)
    mask = np.isfinite(d)
    return np.flatnonzero(mask), j[mask], d[mask]


def evaluate_alignment(source, target, pose: Pose, max_corr_dist):
    """Fitness and inlier RMSE of ``source`` mapped by ``pose`` onto ``target``."""
    src = _as_points(source)
    tgt = target if isinstance(target, RegistrationTarget) else RegistrationTarget(target)
    if len(src) == 0:
        return 0.0, 0.0
    i, _, d = _correspondences(tgt, pose.apply(src), max_corr_dist)
    if len(i) == 0:
        return 0.0, 0.0
    return len(i) / len(src), float(np.sqrt(np.mean(d**2)))


def _finish(source_pts, target, R, t, it, converged, init_fit, init_rmse, max_corr, history):
    pose = Pose.from_rt(R, t)
    fitness, rmse = evaluate_alignment(source_pts, target, pose, max_corr)
    return RegResult(pose, fitness, rmse, it, converged, init_fit, init_rmse, history)


def _prepare(source, target, init, params):
    params = params or RegParams()
    src = _as_points(source)
    if len(src) == 0:
        raise NoDataError("registration source is empty")
    tgt = target if isinstance(target, RegistrationTarget) else RegistrationTarget(target, params)
    init = init or Pose.identity()
    return src, tgt, init, params


def icp_align(source, target, init: Pose | None = None, params: RegParams | None = None) -> RegResult:
    """Point-to-point ICP with closed-form (Kabsch) updates."""
    src, tgt, init, params = _prepare(source, target, init, params)
    R, t = init.R, init.translation.copy()
    init_fit, init_rmse = evaluate_alignment(src, tgt, init, params.max_corr_dist)
    if init_fit == 0.0:
        raise NoOverlapError("no correspondences within max_corr_dist at the initial pose")
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        moved = src @ R.T + t
        i, j, _ = _correspondences(tgt, moved, params.max_corr_dist)
        if len(i) < 3:
            raise NoOverlapError("correspondences lost during ICP")
        dR, dt, _ = kabsch(moved[i], tgt.points[j])
        R, t = dR @ R, dR @ t + dt
        rot = np.arccos(np.clip((np.trace(dR) - 1) / 2, -1.0, 1.0))
        if np.linalg.norm(dt) < params.translation_eps and rot < params.rotation_eps:
            converged = True
            break
    return _finish(src, tgt, R, t, it, converged, init_fit, init_rmse, params.max_corr_dist, [])


def _gicp_cost(d, M):
    return float(np.einsum("ni,nij,nj->", d, M, d))


def _check_observability(J, normals, moved):
    """Reject poses that the target surfaces cannot pin down.

    Uses the point-to-plane information ``sum (n^T J)^T (n^T J)`` with
    rotations scaled by the cloud radius, so a direction constrained only by
    tangential residuals (e.g. sliding along a single plane) shows up as a
    vanishing eigenvalue.
    """
    scale = np.sqrt(np.mean(np.sum((moved - moved.mean(axis=0)) ** 2, axis=1))) or 1.0
    nJ = np.einsum("nk,nkj->nj", normals, J)
    nJ[:, 3:] /= scale
    ev = np.linalg.eigvalsh(nJ.T @ nJ)
    ratio = ev[0] / ev[-1] if ev[-1] > 0 else 0.0
    if ratio < DEGENERACY_RATIO:
        raise SingularSystemError(f"GICP normal matrix is rank-deficient (eigenvalue ratio {ratio:.2e})")


def gicp_align(source, target, init: Pose | None = None, params: RegParams | None = None, source_covariances=None) -> RegResult:
    """Generalized ICP (plane-to-plane) by Gauss-Newton with step halving.

    Minimizes ``sum d^T (C_B + R C_A R^T)^-1 d`` with ``d = b - (R a + t)``
    over nearest-neighbour correspondences within ``max_corr_dist``.
    """
    src, tgt, init, params = _prepare(source, target, init, params)
    C_A = source_covariances
    if C_A is None:
        C_A = estimate_covariances(src, params.k_neighbors, params.cov_epsilon)
    C_B = tgt.covariances
    R, t = init.R, init.translation.copy()
    init_fit, init_rmse = evaluate_alignment(src, tgt, init, params.max_corr_dist)
    if init_fit == 0.0:
        raise NoOverlapError("no correspondences within max_corr_dist at the initial pose")
    converged = False
    history = []
    it = 0
    for it in range(1, params.max_iterations + 1):
        moved = src @ R.T + t
        i, j, _ = _correspondences(tgt, moved, params.max_corr_dist)
        if len(i) < 6:
            raise NoOverlapError("correspondences lost during GICP")
        a = src[i]
        y = moved[i]
        b = tgt.points[j]
        M = np.linalg.inv(C_B[j] + R @ C_A[i] @ R.T)
        d = b - y
        # J = [-I, [y]x]
        n = len(i)
        J = np.zeros((n, 3, 6))
        J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = -1.0
        J[:, 0, 4], J[:, 0, 5] = -y[:, 2], y[:, 1]
        J[:, 1, 3], J[:, 1, 5] = y[:, 2], -y[:, 0]
        J[:, 2, 3], J[:, 2, 4] = -y[:, 1], y[:, 0]
        MJ = M @ J
        H = np.einsum("nki,nkj->ij", J, MJ)
        g = np.einsum("nki,nk->i", MJ, d)
        _check_observability(J, tgt.normals[j], y)
        step = -np.linalg.solve(H, g)
        cost0 = _gicp_cost(d, M)
        small = np.linalg.norm(step[:3]) < params.translation_eps and np.linalg.norm(step[3:]) < params.rotation_eps
        accepted = False
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            R1, t1 = apply_increment(R, t, scale * step)
            cost1 = _gicp_cost(b - (a @ R1.T + t1), M)
            if cost1 <= cost0:
                accepted = True
                break
            scale *= 0.5
        if accepted:
            history.append((cost0, cost1))
            R, t = R1, t1
        if small:
            converged = True
            break
        if not accepted:
            break
    return _finish(src, tgt, R, t, it, converged, init_fit, init_rmse, params.max_corr_dist, history)


class GicpRegistration(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit(source, target)`` aligns, ``transform`` maps points.

    After fitting, ``pose_`` is the target-from-source transform and
    ``result_`` the full :class:`RegResult`.
    """

    def __init__(
        self,
        method="gicp",
        max_corr_dist=1.0,
        max_iterations=50,
        translation_eps=1e-4,
        rotation_eps=1e-4,
        k_neighbors=20,
        cov_epsilon=1e-3,
    ):
        self.method = method
        self.max_corr_dist = max_corr_dist
        self.max_iterations = max_iterations
        self.translation_eps = translation_eps
        self.rotation_eps = rotation_eps
        self.k_neighbors = k_neighbors
        self.cov_epsilon = cov_epsilon

    def _params(self):
        return RegParams(
            self.max_corr_dist,
            self.max_iterations,
            self.translation_eps,
            self.rotation_eps,
            self.k_neighbors,
            self.cov_epsilon,
        )

    def fit(self, X, y, init=None):
        if self.method not in ("gicp", "icp"):
            raise ConfigError(f"unknown method {self.method!r}")
        X = check_points(X, allow_empty=False)
        y = check_points(y, allow_empty=False, input_name="y")
        align = gicp_align if self.method == "gicp" else icp_align
        self.result_ = align(X, y, init, self._params())
        self.pose_ = self.result_.pose
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        return self.pose_.apply(check_points(X))


# --------------------------------------------------------------------------
# odometry


def _extrapolate(prev2: Pose, prev1: Pose) -> Pose:
    """Constant-velocity prediction: apply the last relative motion once more."""
    return prev1 @ (prev2.inverse() @ prev1)


def incremental_odometry(
    scans,
    params: RegParams | None = None,
    *,
    scan_leaf=0.2,
    map_leaf=0.2,
    keyframe_distance=0.5,
    keyframe_angle=np.deg2rad(5.0),
    max_keyframes=20,
) -> Trajectory:
    """Scan-to-local-map GICP odometry.

    The first pose is the identity. Each later scan is registered against a
    voxel-downsampled map of the last ``max_keyframes`` keyframes, starting
    from a constant-velocity prediction. A failed registration keeps the
    predicted pose and marks it degraded.
    """
    params = params or RegParams()
    scans = list(scans)
    if not scans:
        raise NoDataError("odometry needs at least one scan")
    stamps = [s.stamp for s in scans]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise DataError("scans must be strictly time-ordered")

    poses = [Pose.identity(stamps[0])]
    degraded = [False]
    keyframes = [voxel_downsample(scans[0], scan_leaf).points]
    last_key = poses[0]
    target = None

    def rebuild():
        local = voxel_downsample(PointCloud(np.concatenate(keyframes)), map_leaf)
        return RegistrationTarget(local, params)

    target = rebuild()
    for k in range(1, len(scans)):
        pred = _extrapolate(poses[-2], poses[-1]) if k >= 2 else poses[-1]
        src = voxel_downsample(scans[k], scan_leaf)
        ok = True
        try:
            res = gicp_align(src, target, pred, params)
            pose = res.pose
            if not res.converged and res.fitness < 0.3:
                ok = False
        except (NoOverlapError, SingularSystemError, InsufficientDataError) as exc:
            log.warning("odometry: scan %d registration failed: %s", k, exc)
            ok = False
        if not ok:
            pose = pred
        pose = pose.with_stamp(stamps[k])
        poses.append(pose)
        degraded.append(not ok)
        if ok and (
            pose.distance_to(last_key) > keyframe_distance or pose.angle_to(last_key) > keyframe_angle
        ):
            keyframes.append(transform_cloud(src, pose).points)
            keyframes = keyframes[-max_keyframes:]
            last_key = pose
            target = rebuild()
    return Trajectory.from_poses(poses, degraded)
