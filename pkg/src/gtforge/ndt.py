"""3D Normal Distributions Transform: map model, scoring and scan alignment.

Each occupied voxel of the map holds a Gaussian; a scan point is scored
only against the voxel that contains it, with the usual Gaussian plus
uniform-outlier mixture approximated by a single exponential::

    s(x) = -d1 * exp(-d2 / 2 * x^T C^-1 x)

Pose increments follow :mod:`gtforge.registration`: ``(dx, dy, dz, rx, ry, rz)``
applied on the left.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, DataError, LocalizationLostError, NoDataError, NoOverlapError
from .geometry import PointCloud, Pose, check_points, skew, voxel_downsample
from .registration import RegResult, _extrapolate, apply_increment
from .trajectory import Trajectory

log = logging.getLogger(__name__)

EIGEN_FLOOR = 1e-3
MIN_VARIANCE = 1e-8
MAX_ROTATION_STEP = 0.2
_KEY_OFFSET = 1 << 20
_MAGIC = b"GTNDTGRD"
_VERSION = 1


@dataclass(frozen=True)
class NdtParams:
    cell_size: float = 1.0
    min_points_per_cell: int = 6
    outlier_ratio: float = 0.55
    max_iterations: int = 50
    translation_eps: float = 1e-4
    rotation_eps: float = 1e-4

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigError("NdtParams.cell_size must be positive")
        if not 0 <= self.outlier_ratio < 1:
            raise ConfigError("NdtParams.outlier_ratio must be in [0, 1)")
        if self.min_points_per_cell < 1 or self.max_iterations < 1:
            raise ConfigError("NdtParams counts must be >= 1")
        if not (self.translation_eps > 0 and self.rotation_eps > 0):
            raise ConfigError("NdtParams tolerances must be positive")


def mixture_constants(cell_size, outlier_ratio):
    """``(d1, d2)`` fitting the Gaussian + uniform mixture (Magnusson 2009)."""
    c1 = 10.0 * (1.0 - outlier_ratio)
    c2 = outlier_ratio / cell_size**3
    d3 = -np.log(c2)
    d1 = -np.log(c1 + c2) - d3
    d2 = -2.0 * np.log((-np.log(c1 * np.exp(-0.5) + c2) - d3) / d1)
    return d1, d2


def _pack(keys):
    k = keys.astype(np.int64) + _KEY_OFFSET
    return (k[:, 0] << 42) | (k[:, 1] << 21) | k[:, 2]


@dataclass(frozen=True)
class NdtGrid:
    """Sparse voxel map of Gaussians, cells sorted by packed key."""

    cell_size: float
    origin: np.ndarray
    keys: np.ndarray  # (M, 3) int64
    counts: np.ndarray  # (M,)
    means: np.ndarray  # (M, 3)
    covariances: np.ndarray  # (M, 3, 3)
    inv_covariances: np.ndarray  # (M, 3, 3)
    outlier_ratio: float = 0.55

    def __post_init__(self):
        order = np.argsort(_pack(self.keys), kind="stable") if len(self.keys) else np.zeros(0, int)
        if len(order) and np.any(order != np.arange(len(order))):
            raise DataError("grid cells must be sorted by key")
        object.__setattr__(self, "_packed", _pack(self.keys) if len(self.keys) else np.zeros(0, np.int64))

    def __len__(self):
        return len(self.keys)

    @property
    def normals(self):
        return np.linalg.eigh(self.covariances)[1][:, :, 0]

    def lookup(self, points):
        """Cell index of each point, ``-1`` where the containing voxel is empty."""
        if len(self) == 0 or len(points) == 0:
            return np.full(len(points), -1)
        keys = np.floor((points - self.origin) / self.cell_size).astype(np.int64)
        packed = _pack(keys)
        pos = np.searchsorted(self._packed, packed)
        pos = np.minimum(pos, len(self._packed) - 1)
        return np.where(self._packed[pos] == packed, pos, -1)

    def cell(self, i):
        return {
            "key": self.keys[i],
            "count": int(self.counts[i]),
            "mean": self.means[i],
            "covariance": self.covariances[i],
            "inv_covariance": self.inv_covariances[i],
        }


def regularize_covariance(cov):
    """Floor eigenvalues at ``EIGEN_FLOOR`` times the largest one.

    Returns ``(covariance, inverse)``; fully degenerate cells become
    isotropic with variance ``MIN_VARIANCE``.
    """
    vals, vecs = np.linalg.eigh(cov)
    floor = np.maximum(EIGEN_FLOOR * vals[..., -1:], MIN_VARIANCE)
    vals = np.maximum(vals, floor)
    reg = np.einsum("...ij,...j,...kj->...ik", vecs, vals, vecs)
    inv = np.einsum("...ij,...j,...kj->...ik", vecs, 1.0 / vals, vecs)
    return 0.5 * (reg + np.swapaxes(reg, -1, -2)), 0.5 * (inv + np.swapaxes(inv, -1, -2))


def build_grid(map_cloud, params: NdtParams | None = None, origin=None) -> NdtGrid:
    """Per-voxel mean and sample covariance of the map points.

    Voxels with fewer than ``min_points_per_cell`` points are dropped. The
    default origin sits half a cell below the map's minimum corner.
    """
    params = params or NdtParams()
    pts = map_cloud.points if isinstance(map_cloud, PointCloud) else check_points(map_cloud)
    if len(pts) == 0:
        raise NoDataError("cannot build an NDT grid from an empty map")
    cs = params.cell_size
    origin = pts.min(axis=0) - cs / 2 if origin is None else np.asarray(origin, dtype=float)
    keys = np.floor((pts - origin) / cs).astype(np.int64)
    packed = _pack(keys)
    uniq, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    keep = counts >= params.min_points_per_cell
    n = len(uniq)
    sums = np.stack([np.bincount(inverse, weights=pts[:, a], minlength=n) for a in range(3)], axis=1)
    means = sums / counts[:, None]
    centered = pts - means[inverse]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = np.bincount(inverse, weights=centered[:, a] * centered[:, b], minlength=n)
    cov /= np.maximum(counts - 1, 1)[:, None, None]
    cov, means, counts, uniq = cov[keep], means[keep], counts[keep], uniq[keep]
    cov, inv = regularize_covariance(cov) if len(cov) else (cov, cov.copy())
    k = np.stack([(uniq >> 42) & 0x1FFFFF, (uniq >> 21) & 0x1FFFFF, uniq & 0x1FFFFF], axis=1) - _KEY_OFFSET
    return NdtGrid(cs, origin, k.astype(np.int64), counts, means, cov, inv, params.outlier_ratio)


def _point_terms(grid: NdtGrid, pts_body, R, t, with_hessian=True):
    """Score, gradient and Hessian contributions of every point inside a cell."""
    d1, d2 = mixture_constants(grid.cell_size, grid.outlier_ratio)
    y = pts_body @ R.T + t
    idx = grid.lookup(y)
    hit = idx >= 0
    y = y[hit]
    idx = idx[hit]
    if len(y) == 0:
        return 0.0, np.zeros(6), np.zeros((6, 6)), 0
    x = y - grid.means[idx]
    C = grid.inv_covariances[idx]
    Cx = np.einsum("nij,nj->ni", C, x)
    q = np.einsum("ni,ni->n", x, Cx)
    e = np.exp(-0.5 * d2 * q)
    score = float(np.sum(-d1 * e))
    # dy/dxi = [I, -[y]x]
    n = len(y)
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    J[:, 0, 4], J[:, 0, 5] = y[:, 2], -y[:, 1]
    J[:, 1, 3], J[:, 1, 5] = -y[:, 2], y[:, 0]
    J[:, 2, 3], J[:, 2, 4] = y[:, 1], -y[:, 0]
    xCJ = np.einsum("ni,nij->nj", Cx, J)
    w = d1 * d2 * e
    grad = np.einsum("n,nj->j", w, xCJ)
    if not with_hessian:
        return score, grad, None, n
    CJ = C @ J
    JCJ = np.einsum("nki,nkj->nij", J, CJ)
    # second derivatives of y w.r.t. rotation: 0.5 (e_a x (e_b x y) + e_b x (e_a x y))
    E = [skew(v) for v in np.eye(3)]
    xCyy = np.zeros((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            Sab = 0.5 * (E[a] @ E[b] + E[b] @ E[a])
            yab = y @ Sab.T
            xCyy[:, a, b] = xCyy[:, b, a] = np.einsum("ni,ni->n", Cx, yab)
    Hp = -d2 * np.einsum("ni,nj->nij", xCJ, xCJ) + JCJ
    Hp[:, 3:, 3:] += xCyy
    hess = np.einsum("n,nij->ij", w, Hp)
    return score, grad, hess, n


def score_pose(grid: NdtGrid, scan, T: Pose, with_hessian=True):
    """NDT score of ``scan`` placed at ``T`` with analytic gradient and Hessian.

    Derivatives are with respect to a left increment at ``T``. Points in
    empty voxels contribute nothing.
    """
    if len(grid) == 0:
        raise NoDataError("NDT grid is empty")
    pts = scan.points if isinstance(scan, PointCloud) else check_points(scan)
    s, g, H, _ = _point_terms(grid, pts, T.R, T.translation, with_hessian)
    return s, g, H


def _overlap(grid, pts, R, t):
    return int(np.count_nonzero(grid.lookup(pts @ R.T + t) >= 0))


def _surface_rmse(grid, pts, pose):
    y = pose.apply(pts)
    idx = grid.lookup(y)
    hit = idx >= 0
    if not hit.any():
        return 0.0
    x = y[hit] - grid.means[idx[hit]]
    nrm = grid.normals[idx[hit]]
    return float(np.sqrt(np.mean(np.einsum("ni,ni->n", x, nrm) ** 2)))


def align(grid: NdtGrid, scan, init: Pose | None = None, params: NdtParams | None = None) -> RegResult:
    """Newton ascent on the NDT score with step halving.

    The Hessian of the negative score is shifted by ``lambda * I`` whenever it
    is not positive definite. ``fitness`` is the fraction of scan points in a
    mapped voxel; ``inlier_rmse`` is their RMS distance to the local cell
    plane (along the cell's least-variance axis).
    """
    params = params or NdtParams()
    init = init or Pose.identity()
    pts = scan.points if isinstance(scan, PointCloud) else check_points(scan)
    if len(grid) == 0 or len(pts) == 0:
        raise NoDataError("NDT alignment needs a non-empty grid and scan")
    R, t = init.R, init.translation.copy()
    n0 = _overlap(grid, pts, R, t)
    if n0 == 0:
        raise NoOverlapError("scan does not overlap the NDT grid at the initial pose")
    init_fit = n0 / len(pts)
    init_rmse = _surface_rmse(grid, pts, init)
    converged = False
    history = []
    it = 0
    for it in range(1, params.max_iterations + 1):
        s0, g, H, n = _point_terms(grid, pts, R, t)
        if n == 0:
            raise NoOverlapError("scan left the NDT grid during alignment")
        A = -H
        vals = np.linalg.eigvalsh(A)
        scale = max(abs(vals[-1]), 1e-12)
        if vals[0] <= 1e-9 * scale:
            A = A + (2.0 * abs(vals[0]) + 1e-6 * scale) * np.eye(6)
        step = np.linalg.solve(A, g)
        # trust region: at most half a cell / MAX_ROTATION_STEP per iteration
        shrink = max(
            np.linalg.norm(step[:3]) / (0.5 * grid.cell_size),
            np.linalg.norm(step[3:]) / MAX_ROTATION_STEP,
            1.0,
        )
        step = step / shrink
        small = np.linalg.norm(step[:3]) < params.translation_eps and np.linalg.norm(step[3:]) < params.rotation_eps
        accepted = False
        frac = 1.0
        for _ in range(9):
            R1, t1 = apply_increment(R, t, frac * step)
            s1, _, _, _ = _point_terms(grid, pts, R1, t1, with_hessian=False)
            if s1 >= s0:
                accepted = True
                break
            frac *= 0.5
        if accepted:
            history.append((-s0, -s1))
            R, t = R1, t1
        if small:
            converged = True
            break
        if not accepted:
            break
    pose = Pose.from_rt(R, t, init.t)
    fit = _overlap(grid, pts, R, t) / len(pts)
    return RegResult(pose, fit, _surface_rmse(grid, pts, pose), it, converged, init_fit, init_rmse, history)


def track_sequence(
    grid: NdtGrid,
    scans,
    init: Pose | None = None,
    params: NdtParams | None = None,
    min_fitness=0.3,
    odometry: Trajectory | None = None,
    max_lost=50,
) -> Trajectory:
    """Localize each scan against the grid.

    Scans are voxel-downsampled at a quarter cell before alignment. The
    initial guess chains the previous pose with the relative motion of
    ``odometry`` (one pose per scan) when given, else extrapolates the last
    two poses at constant velocity. A failed alignment keeps the prediction
    and is flagged degraded. :class:`LocalizationLostError` is raised when the
    first scan fails or more than ``max_lost`` consecutive scans fail.
    """
    params = params or NdtParams()
    init = init or Pose.identity()
    scans = list(scans)
    if odometry is not None and len(odometry) != len(scans):
        raise DataError(f"odometry has {len(odometry)} poses for {len(scans)} scans")
    poses, degraded = [], []
    run = 0
    for k, scan in enumerate(scans):
        if k == 0:
            pred = init
        elif odometry is not None:
            pred = poses[-1] @ (odometry[k - 1].inverse() @ odometry[k])
        elif k == 1:
            pred = poses[-1]
        else:
            pred = _extrapolate(poses[-2], poses[-1])
        src = voxel_downsample(scan, params.cell_size / 4)
        try:
            res = align(grid, src, pred, params)
            pose = res.pose
            bad = res.fitness < min_fitness
            why = f"fitness {res.fitness:.3f}"
        except (NoOverlapError, NoDataError) as exc:
            bad = True
            why = str(exc)
        if bad:
            if k == 0:
                raise LocalizationLostError(f"first scan could not be localized: {why}")
            run += 1
            if run > max_lost:
                raise LocalizationLostError(f"{run} consecutive scans failed to localize (last: scan {k}, {why})")
            log.debug("ndt: scan %d failed: %s", k, why)
            pose = pred
        else:
            run = 0
        poses.append(pose.with_stamp(scan.stamp))
        degraded.append(bad)
    n_bad = int(np.sum(degraded))
    if n_bad:
        log.warning("ndt: %d of %d scans kept their predicted pose", n_bad, len(scans))
    return Trajectory.from_poses(poses, degraded)


# --------------------------------------------------------------------------
# binary cache


def save_grid(path, grid: NdtGrid):
    """Versioned little-endian dump; :func:`load_grid` restores it bit-exactly."""
    n = len(grid)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<d", grid.cell_size))
        fh.write(struct.pack("<3d", *grid.origin))
        fh.write(struct.pack("<d", grid.outlier_ratio))
        fh.write(struct.pack("<Q", n))
        fh.write(np.ascontiguousarray(grid.keys, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(grid.counts, dtype="<i8").tobytes())
        for arr in (grid.means, grid.covariances, grid.inv_covariances):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_grid(path) -> NdtGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise DataError(f"{path}: not an NDT grid cache")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported grid cache version {version}")
    off = 12
    (cell_size,) = struct.unpack_from("<d", data, off)
    origin = np.array(struct.unpack_from("<3d", data, off + 8))
    (outlier_ratio,) = struct.unpack_from("<d", data, off + 32)
    (n,) = struct.unpack_from("<Q", data, off + 40)
    off += 48

    def take(count, dtype, shape):
        nonlocal off
        size = np.dtype(dtype).itemsize * count
        if off + size > len(data):
            raise DataError(f"{path}: truncated grid cache")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape).astype(dtype[1:])
        off += size
        return arr

    keys = take(3 * n, "<i8", (n, 3))
    counts = take(n, "<i8", (n,))
    means = take(3 * n, "<f8", (n, 3))
    cov = take(9 * n, "<f8", (n, 3, 3))
    inv = take(9 * n, "<f8", (n, 3, 3))
    return NdtGrid(cell_size, origin, keys, counts, means, cov, inv, outlier_ratio)


# --------------------------------------------------------------------------
# estimator


class NdtLocalizer(BaseEstimator):
    """``fit`` builds the grid from map points; ``predict`` tracks a scan sequence."""

    def __init__(
        self,
        cell_size=1.0,
        min_points_per_cell=6,
        outlier_ratio=0.55,
        max_iterations=50,
        translation_eps=1e-4,
        rotation_eps=1e-4,
    ):
        self.cell_size = cell_size
        self.min_points_per_cell = min_points_per_cell
        self.outlier_ratio = outlier_ratio
        self.max_iterations = max_iterations
        self.translation_eps = translation_eps
        self.rotation_eps = rotation_eps

    def _params(self):
        return NdtParams(
            self.cell_size,
            self.min_points_per_cell,
            self.outlier_ratio,
            self.max_iterations,
            self.translation_eps,
            self.rotation_eps,
        )

    def fit(self, X, y=None):
        X = check_points(X, allow_empty=False)
        self.grid_ = build_grid(X, self._params())
        self.n_features_in_ = 3
        return self

    def _check_fitted(self):
        if not hasattr(self, "grid_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("NdtLocalizer is not fitted")

    def align(self, scan, init=None):
        self._check_fitted()
        if not isinstance(scan, PointCloud):
            scan = PointCloud(check_points(scan))
        return align(self.grid_, scan, init, self._params())

    def predict(self, scans, init=None):
        """Trajectory of a sequence of :class:`PointCloud` scans."""
        self._check_fitted()
        return track_sequence(self.grid_, scans, init, self._params())

    def score(self, X, pose=None):
        self._check_fitted()
        return score_pose(self.grid_, check_points(X), pose or Pose.identity(), with_hessian=False)[0]
