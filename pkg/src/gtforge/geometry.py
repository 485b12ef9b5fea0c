"""Pose algebra, point clouds, spatial indexing and cloud filters.

Conventions: quaternions are (w, x, y, z) with the Hamilton product, and a
:class:`Pose` is a passive world-from-body transform, so ``pose.apply(p)``
maps body coordinates into the world frame.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .errors import ConfigError, NoDataError

__all__ = [
    "Pose",
    "PointCloud",
    "SpatialIndex",
    "SmallCloudWarning",
    "quat_multiply",
    "quat_to_matrix",
    "matrix_to_quat",
    "so3_exp",
    "so3_log",
    "skew",
    "compose",
    "kabsch",
    "pose_to_dict",
    "pose_from_dict",
    "transform_cloud",
    "voxel_downsample",
    "voxel_keys",
    "knn_query",
    "remove_outliers",
    "check_points",
    "VoxelDownsampler",
    "StatisticalOutlierRemover",
]


class SmallCloudWarning(UserWarning):
    """Raised (as a warning) when a filter sees too few points to act."""


# --------------------------------------------------------------------------
# rotation helpers


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(a, b):
    """Hamilton product ``a * b`` of two (w, x, y, z) quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Rotation matrix to a unit quaternion with non-negative scalar part."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def so3_exp(rotvec):
    """Rodrigues' formula: rotation vector (radians) to rotation matrix."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec)
    K = skew(rotvec)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R):
    """Rotation matrix to rotation vector (radians)."""
    q = matrix_to_quat(R)
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < 1e-12:
        return 2.0 * vec
    return 2.0 * np.arctan2(s, q[0]) * vec / s


# --------------------------------------------------------------------------
# Pose


@dataclass(frozen=True)
class Pose:
    """Timestamped rigid transform (unit quaternion + translation in meters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ConfigError("pose rotation must be a non-zero finite quaternion")
        tr = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(tr)):
            raise ConfigError("pose translation must be finite")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def identity(cls, t=0.0):
        return cls(t=t)

    @classmethod
    def from_matrix(cls, T, t=0.0):
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3], t)

    @classmethod
    def from_rt(cls, R, trans, t=0.0):
        return cls(matrix_to_quat(R), trans, t)

    @classmethod
    def from_rotvec(cls, rotvec, trans=(0.0, 0.0, 0.0), t=0.0):
        return cls.from_rt(so3_exp(rotvec), trans, t)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -(quat_to_matrix(q) @ self.translation), self.t)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def __matmul__(self, other):
        return compose(self, other)

    def with_stamp(self, t):
        return replace(self, t=t)

    def angle_to(self, other):
        """Geodesic rotation distance in radians."""
        return float(np.linalg.norm(so3_log(self.R.T @ other.R)))

    def distance_to(self, other):
        return float(np.linalg.norm(self.translation - other.translation))


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: applies ``b`` first, then ``a``. Keeps the stamp of ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    return Pose(q, a.R @ b.translation + a.translation, a.t)


def kabsch(src, dst):
    """Least-squares rotation and translation with ``dst ≈ R src + t``."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s, S


def pose_to_dict(p: Pose):
    return {"translation": [float(v) for v in p.translation], "rotation_wxyz": [float(v) for v in p.rotation]}


def pose_from_dict(d) -> Pose:
    unknown = set(d) - {"translation", "rotation_wxyz"}
    if unknown:
        raise ConfigError(f"unknown pose fields: {sorted(unknown)}")
    return Pose(d.get("rotation_wxyz", [1.0, 0.0, 0.0, 0.0]), d.get("translation", [0.0, 0.0, 0.0]))


# --------------------------------------------------------------------------
# point clouds


def check_points(X, *, allow_empty=True, input_name="X"):
    """Validate an (N, 3) float array of coordinates."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        if not allow_empty:
            raise NoDataError(f"{input_name} is empty")
        return np.zeros((0, 3))
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, input_name=input_name)
    if X.shape[1] != 3:
        raise ConfigError(f"{input_name} must have 3 columns, got {X.shape[1]}")
    return X


@dataclass(frozen=True)
class PointCloud:
    """Timestamped set of 3D points with optional per-point intensity.

    Non-finite rows are dropped on construction.
    """

    points: np.ndarray
    stamp: float = 0.0
    frame_id: str = ""
    intensity: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = np.zeros((0, 3))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ConfigError(f"points must be (N, 3), got {pts.shape}")
        inten = self.intensity
        finite = np.all(np.isfinite(pts), axis=1)
        if inten is not None:
            inten = np.asarray(inten, dtype=float).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ConfigError("intensity length does not match point count")
            finite &= np.isfinite(inten)
        if not finite.all():
            pts = pts[finite]
            inten = inten[finite] if inten is not None else None
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", inten)
        object.__setattr__(self, "stamp", float(self.stamp))

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points

    def select(self, mask_or_index):
        inten = None if self.intensity is None else self.intensity[mask_or_index]
        return PointCloud(self.points[mask_or_index], self.stamp, self.frame_id, inten)

    @classmethod
    def concatenate(cls, clouds, stamp=None, frame_id=None):
        clouds = list(clouds)
        if not clouds:
            return cls(np.zeros((0, 3)), stamp or 0.0, frame_id or "")
        pts = np.concatenate([c.points for c in clouds], axis=0)
        inten = None
        if all(c.intensity is not None for c in clouds):
            inten = np.concatenate([c.intensity for c in clouds])
        return cls(
            pts,
            clouds[0].stamp if stamp is None else stamp,
            clouds[0].frame_id if frame_id is None else frame_id,
            inten,
        )


def transform_cloud(c: PointCloud, T: Pose) -> PointCloud:
    return PointCloud(T.apply(c.points), c.stamp, c.frame_id, c.intensity)


def voxel_keys(points, leaf):
    """Integer voxel coordinates ``floor(p / leaf)`` per axis."""
    return np.floor(np.asarray(points) / leaf).astype(np.int64)


def _group_by_voxel(points, leaf):
    """Return (inverse index, number of voxels) with voxels in lexicographic key order."""
    keys = voxel_keys(points, leaf)
    kmin = keys.min(axis=0)
    span = keys.max(axis=0) - kmin + 1
    rel = keys - kmin
    if np.prod(span.astype(float)) < 2**62:
        packed = (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]
        _, inverse = np.unique(packed, return_inverse=True)
    else:
        _, inverse = np.unique(rel, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    return inverse, int(inverse.max()) + 1


def voxel_downsample(c: PointCloud, leaf: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid."""
    if not leaf > 0:
        raise ConfigError(f"voxel leaf must be positive, got {leaf}")
    if len(c) == 0:
        return c
    inverse, n = _group_by_voxel(c.points, leaf)
    counts = np.bincount(inverse, minlength=n).astype(float)
    out = np.empty((n, 3))
    for axis in range(3):
        out[:, axis] = np.bincount(inverse, weights=c.points[:, axis], minlength=n) / counts
    inten = None
    if c.intensity is not None:
        inten = np.bincount(inverse, weights=c.intensity, minlength=n) / counts
    return PointCloud(out, c.stamp, c.frame_id, inten)


# --------------------------------------------------------------------------
# spatial index


class SpatialIndex:
    """Exact k-d tree over the points of a cloud."""

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.points
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def query(self, queries, k=1, distance_upper_bound=np.inf):
        """Batched exact k-NN; rows are sorted by distance.

        Missing neighbours (beyond ``distance_upper_bound``) come back with
        distance ``inf`` and index ``len(self)``.
        """
        if self._tree is None:
            raise NoDataError("spatial index is empty")
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=k, distance_upper_bound=distance_upper_bound)
        return d, i

    def query_radius(self, queries, r):
        if self._tree is None:
            raise NoDataError("spatial index is empty")
        return self._tree.query_ball_point(np.asarray(queries, dtype=float), r)


def knn_query(idx: SpatialIndex, q, k: int):
    """The ``min(k, N)`` nearest points to ``q``.

    Returns ``(points, distances, indices)`` with distances nondecreasing.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(idx) == 0:
        raise NoDataError("spatial index is empty")
    k = min(k, len(idx))
    d, i = idx.query(np.asarray(q, dtype=float).reshape(3), k=k)
    d = np.atleast_1d(d)
    i = np.atleast_1d(i)
    return idx.points[i], d, i


def mean_knn_distances(points, k):
    """Mean distance from each point to its ``k`` nearest other points."""
    tree = cKDTree(points)
    d, _ = tree.query(points, k=k + 1)
    return d[:, 1:].mean(axis=1)


def remove_outliers(c: PointCloud, k: int = 20, std_mult: float = 3.0, return_mask: bool = False):
    """Statistical outlier removal.

    A point is dropped when its mean distance to its ``k`` nearest neighbours
    exceeds ``mean + std_mult * std`` of that quantity over the whole cloud
    (population std). Clouds with fewer than ``k + 1`` points are returned
    unchanged and a :class:`SmallCloudWarning` is emitted.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    keep = np.ones(len(c), dtype=bool)
    if 0 < len(c) < k + 1:
        warnings.warn(f"cloud has {len(c)} points, fewer than k+1={k + 1}; not filtered", SmallCloudWarning, stacklevel=2)
    elif len(c) > 0:
        md = mean_knn_distances(c.points, k)
        keep = md <= md.mean() + std_mult * md.std()
    out = c if keep.all() else c.select(keep)
    return (out, keep) if return_mask else out


# --------------------------------------------------------------------------
# estimator wrappers


class VoxelDownsampler(TransformerMixin, BaseEstimator):
    """Stateless voxel-grid centroid filter for (N, 3) arrays."""

    def __init__(self, leaf=0.1):
        self.leaf = leaf

    def fit(self, X, y=None):
        check_points(X)
        if not self.leaf > 0:
            raise ConfigError(f"voxel leaf must be positive, got {self.leaf}")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        return voxel_downsample(PointCloud(check_points(X)), self.leaf).points


class StatisticalOutlierRemover(TransformerMixin, BaseEstimator):
    """Drops points whose mean k-NN distance is anomalously large.

    ``fit`` records the inlier mask of the fitted cloud in ``inlier_mask_``;
    ``transform`` filters whatever cloud it is given.
    """

    def __init__(self, k=20, std_mult=3.0):
        self.k = k
        self.std_mult = std_mult

    def fit(self, X, y=None):
        X = check_points(X)
        _, self.inlier_mask_ = remove_outliers(PointCloud(X), self.k, self.std_mult, return_mask=True)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        return remove_outliers(PointCloud(check_points(X)), self.k, self.std_mult).points
