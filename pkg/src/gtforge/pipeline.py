"""Ground-truth generation: stationary gating, submap integration, prior-map
construction and NDT localization against the prior map.

Dataset directory layout::

    scans_spinning/NNNNNN.pcd   spinning-lidar scans, name order = time order
    scans_solid/NNNNNN.pcd      solid-state frames
    imu.csv                     header + rows t,ax,ay,az,gx,gy,gz
    odometry.tum                optional external seed poses
    manifest.json               optional; supplies solid_extrinsic and rates

Outputs: ``prior_map.pcd``, ``ground_truth.tum``, ``report.json`` and
``timing.json`` (wall-clock only, kept apart so the report is reproducible).
"""
from __future__ import annotations

import dataclasses
import glob
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DataError,
    InsufficientDataError,
    MissingInputError,
    NoDataError,
    NoOverlapError,
    SingularSystemError,
    ZeroSegmentsError,
)
from .geometry import (
    PointCloud,
    Pose,
    SmallCloudWarning,
    pose_from_dict,
    pose_to_dict,
    remove_outliers,
    transform_cloud,
    voxel_downsample,
)
from .ndt import NdtParams, build_grid, track_sequence
from .pcd import read_pcd, write_pcd
from .registration import RegistrationTarget, RegParams, gicp_align, incremental_odometry
from .trajectory import Trajectory, read_tum, write_tum

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class StationaryThresholds:
    accel_dev_max: float = 0.01
    gyro_max: float = 0.01
    lin_vel_max: float = 0.01
    min_duration: float = 1.0
    window: float = 0.5

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"StationaryThresholds.{f.name} must be positive")


@dataclass(frozen=True)
class OdometryParams:
    scan_leaf: float = 0.2
    map_leaf: float = 0.2
    keyframe_distance: float = 0.5
    keyframe_angle_deg: float = 5.0
    max_keyframes: int = 20


@dataclass(frozen=True)
class PipelineConfig:
    thresholds: StationaryThresholds = field(default_factory=StationaryThresholds)
    registration: RegParams = field(default_factory=RegParams)
    ndt: NdtParams = field(default_factory=NdtParams)
    odometry: OdometryParams = field(default_factory=OdometryParams)
    denoise_k: int = 20
    denoise_std_mult: float = 4.0
    map_leaf: float = 0.05
    merge_leaf: float = 0.1
    merge_max_translation: float = 0.5
    merge_max_rotation_deg: float = 10.0
    solid_extrinsic: Pose | None = None

    def __post_init__(self):
        positive = ("map_leaf", "merge_leaf", "denoise_k", "denoise_std_mult", "merge_max_translation", "merge_max_rotation_deg")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"PipelineConfig.{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("pipeline config must be an object")
        d = dict(d)
        sub = {"thresholds": StationaryThresholds, "registration": RegParams, "ndt": NdtParams, "odometry": OdometryParams}
        for key, sub_cls in sub.items():
            if key in d:
                d[key] = _strict(sub_cls, d[key], key)
        if d.get("solid_extrinsic") is not None:
            d["solid_extrinsic"] = pose_from_dict(d["solid_extrinsic"])
        return _strict(cls, d, "pipeline")

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v) and not isinstance(v, Pose):
                v = dataclasses.asdict(v)
            elif isinstance(v, Pose):
                v = pose_to_dict(v)
            out[f.name] = v
        return out


# --------------------------------------------------------------------------
# IMU


@dataclass(frozen=True)
class ImuStream:
    """IMU samples: ``t`` (s), ``accel`` (m/s^2, body frame), ``gyro`` (rad/s)."""

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        a = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        g = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        if not (len(t) == len(a) == len(g)):
            raise DataError("IMU arrays have mismatched lengths")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(a)) and np.all(np.isfinite(g))):
            raise DataError("IMU stream contains non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "accel", a)
        object.__setattr__(self, "gyro", g)

    def __len__(self):
        return len(self.t)


def read_imu_csv(path) -> ImuStream:
    if not os.path.exists(path):
        raise MissingInputError(f"no IMU file: {path}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if data.shape[1] != 7:
        raise DataError(f"{path}: expected 7 columns t,ax,ay,az,gx,gy,gz")
    return ImuStream(data[:, 0], data[:, 1:4], data[:, 4:7])


def write_imu_csv(path, imu: ImuStream):
    lines = ["t,ax,ay,az,gx,gy,gz"]
    for t, a, g in zip(imu.t, imu.accel, imu.gyro):
        lines.append(",".join(repr(float(v)) for v in (t, *a, *g)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# stationary gating


def _window_speeds(odom: Trajectory, starts, ends):
    """Least-squares speed of the odometry positions inside each window."""
    t0 = odom.stamps[0]
    t = odom.stamps - t0
    starts, ends = np.asarray(starts) - t0, np.asarray(ends) - t0
    p = odom.translations - odom.translations[0]
    c1 = np.concatenate([[0.0], np.cumsum(t)])
    c2 = np.concatenate([[0.0], np.cumsum(t * t)])
    cp = np.vstack([np.zeros(3), np.cumsum(p, axis=0)])
    ctp = np.vstack([np.zeros(3), np.cumsum(t[:, None] * p, axis=0)])
    lo = np.searchsorted(t, starts, side="left")
    hi = np.searchsorted(t, ends, side="right")
    n = (hi - lo).astype(float)
    st, stt = c1[hi] - c1[lo], c2[hi] - c2[lo]
    sp, stp = cp[hi] - cp[lo], ctp[hi] - ctp[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = stt - st * st / n
        slope = (stp - st[:, None] * sp / n[:, None]) / denom[:, None]
    speed = np.linalg.norm(slope, axis=1)
    # fewer than two poses: fall back to the speed between the bracketing poses
    few = ~(n >= 2) | ~np.isfinite(speed)
    if few.any():
        a = np.clip(lo[few] - 1, 0, len(t) - 1)
        b = np.clip(hi[few], 0, len(t) - 1)
        dt = t[b] - t[a]
        with np.errstate(invalid="ignore", divide="ignore"):
            speed[few] = np.where(dt > 0, np.linalg.norm(p[b] - p[a], axis=1) / dt, 0.0)
    return speed


def detect_stationary_segments(imu: ImuStream, odom: Trajectory | None = None, th: StationaryThresholds | None = None):
    """Maximal time intervals during which the platform is still.

    A window of ``th.window`` seconds starting at each IMU sample is still when
    every sample's acceleration deviates from the window mean by less than
    ``accel_dev_max`` on each axis, every gyro axis stays below ``gyro_max``,
    and (when odometry is given) the odometry speed over the window is below
    ``lin_vel_max``. Segments are unions of still windows; those shorter than
    ``min_duration`` are dropped. Interior boundaries sit halfway between the
    last moving and the first still sample. Returns a list of
    ``(t_start, t_end)``.
    """
    th = th or StationaryThresholds()
    if len(imu) == 0:
        raise NoDataError("IMU stream is empty")
    t = imu.t
    if np.any(np.diff(t) <= 0):
        raise DataError("IMU timestamps are not strictly increasing")
    if len(t) < 2:
        return []
    dt = float(np.median(np.diff(t)))
    w = max(int(round(th.window / dt)), 1)
    if len(t) <= w:
        return []
    from numpy.lib.stride_tricks import sliding_window_view

    acc = sliding_window_view(imu.accel, w + 1, axis=0)  # (n_win, 3, w+1)
    dev = np.max(np.abs(acc - acc.mean(axis=2, keepdims=True)), axis=2)
    gyr = np.max(np.abs(sliding_window_view(imu.gyro, w + 1, axis=0)), axis=2)
    still = np.all(dev < th.accel_dev_max, axis=1) & np.all(gyr < th.gyro_max, axis=1)
    n_win = len(still)
    if odom is not None and len(odom) > 0:
        speed = _window_speeds(odom, t[:n_win], t[w : w + n_win])
        still &= speed < th.lin_vel_max
    cover = np.zeros(len(t) + 1, dtype=int)
    idx = np.flatnonzero(still)
    np.add.at(cover, idx, 1)
    np.add.at(cover, idx + w + 1, -1)
    covered = np.cumsum(cover[:-1]) > 0
    segments = []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], covered.astype(int), [0]])))
    for a, b in zip(edges[::2], edges[1::2]):
        # a transition lies between a moving and a still sample: split the gap
        t0 = float(t[a]) if a == 0 else 0.5 * float(t[a - 1] + t[a])
        t1 = float(t[b - 1]) if b == len(t) else 0.5 * float(t[b - 1] + t[b])
        if t1 - t0 >= th.min_duration - 1e-9:
            segments.append((t0, t1))
    return segments


# --------------------------------------------------------------------------
# submaps and the prior map


@dataclass
class Submap:
    cloud: PointCloud
    pose: Pose
    frame_count: int
    t_start: float
    t_end: float


class SubmapCache:
    """Time-ordered submaps awaiting the merge."""

    def __init__(self, submaps=()):
        self._items = []
        for sm in submaps:
            self.append(sm)

    def append(self, sm: Submap):
        if self._items and sm.t_start < self._items[-1].t_end:
            raise DataError("submaps must be appended in time order")
        self._items.append(sm)

    def clear(self):
        self._items.clear()

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]


@dataclass
class PriorMap:
    cloud: PointCloud
    submap_count: int
    merge_report: list
    denoise_removed: int = 0
    denoise_skipped: bool = False


def integrate_submap(frames, pose: Pose | None = None, extrinsic: Pose | None = None) -> Submap:
    """Concatenate the frames of one still interval.

    ``extrinsic`` (body-from-sensor) moves the frames into the body frame;
    ``pose`` is the odometry pose of the platform during the interval.
    """
    frames = list(frames)
    if not frames:
        raise NoDataError("integrate_submap needs at least one frame")
    cloud = PointCloud.concatenate(frames, stamp=frames[0].stamp)
    if extrinsic is not None:
        cloud = transform_cloud(cloud, extrinsic)
    pose = pose or Pose.identity(frames[0].stamp)
    return Submap(cloud, pose, len(frames), frames[0].stamp, frames[-1].stamp)


def build_prior_map(cache, cfg: PipelineConfig | None = None) -> PriorMap:
    """Merge cached submaps, in order, into one map.

    The first submap, placed at its pose, seeds the map. Every later submap
    starts from its odometry pose, is refined by GICP against the current
    map and merged; the merged map is voxel-downsampled after each merge.
    Submaps whose refinement fails are skipped and reported, and so are
    refinements that raise the inlier RMSE or move the odometry pose by more
    than ``merge_max_translation`` / ``merge_max_rotation_deg`` (a partial
    overlap lets GICP slide along under-constrained surfaces).
    """
    cfg = cfg or PipelineConfig()
    cache = list(cache)
    if not cache:
        raise NoDataError("submap cache is empty")
    first = cache[0]
    map_cloud = transform_cloud(first.cloud, first.pose)
    report = [
        {
            "index": 0,
            "status": "seed",
            "t_start": first.t_start,
            "t_end": first.t_end,
            "frame_count": first.frame_count,
            "points": len(first.cloud),
        }
    ]
    merged = 1
    for i, sm in enumerate(cache[1:], start=1):
        entry = {
            "index": i,
            "t_start": sm.t_start,
            "t_end": sm.t_end,
            "frame_count": sm.frame_count,
            "points": len(sm.cloud),
        }
        src = voxel_downsample(sm.cloud, cfg.merge_leaf)
        try:
            target = RegistrationTarget(voxel_downsample(map_cloud, cfg.merge_leaf), cfg.registration)
            res = gicp_align(src, target, sm.pose, cfg.registration)
        except (NoOverlapError, SingularSystemError, InsufficientDataError) as exc:
            entry.update(status="skipped", error=exc.code, message=str(exc))
            report.append(entry)
            log.warning("submap %d skipped: %s", i, exc)
            continue
        if res.inlier_rmse > res.initial_rmse:
            # GICP minimizes a covariance-weighted cost, not the point RMSE;
            # keep the odometry pose when refinement does not improve it
            res = dataclasses.replace(res, pose=sm.pose, fitness=res.initial_fitness, inlier_rmse=res.initial_rmse)
            entry["refined"] = False
        else:
            entry["refined"] = True
        entry["registration"] = res.summary()
        shift = float(np.linalg.norm(res.pose.translation - sm.pose.translation))
        turn = float(np.degrees(res.pose.angle_to(sm.pose)))
        entry["correction"] = {"translation": shift, "rotation_deg": turn}
        if shift > cfg.merge_max_translation or turn > cfg.merge_max_rotation_deg:
            entry.update(status="rejected")
            report.append(entry)
            log.warning("submap %d rejected: correction %.3f m / %.2f deg", i, shift, turn)
            continue
        entry["status"] = "merged"
        report.append(entry)
        map_cloud = voxel_downsample(
            PointCloud.concatenate([map_cloud, transform_cloud(sm.cloud, res.pose)], stamp=map_cloud.stamp),
            cfg.map_leaf,
        )
        merged += 1
    return PriorMap(PointCloud(map_cloud.points, first.t_start, "map"), merged, report)


def denoise_map(m: PriorMap, cfg: PipelineConfig | None = None) -> PriorMap:
    """Statistical outlier removal over the merged map."""
    cfg = cfg or PipelineConfig()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SmallCloudWarning)
        cloud = remove_outliers(m.cloud, cfg.denoise_k, cfg.denoise_std_mult)
    skipped = any(issubclass(w.category, SmallCloudWarning) for w in caught)
    if skipped:
        log.warning("denoise skipped: map has only %d points", len(m.cloud))
    return dataclasses.replace(
        m, cloud=cloud, denoise_removed=m.denoise_removed + len(m.cloud) - len(cloud), denoise_skipped=skipped
    )


# --------------------------------------------------------------------------
# end to end


@dataclass
class PipelineResult:
    odometry: Trajectory
    segments: list
    cache: list
    prior_map: PriorMap
    grid: object
    ground_truth: Trajectory
    report: dict
    timing: dict


def _frames_in(frames, t0, t1, frame_period):
    tol = 1e-6
    return [f for f in frames if f.stamp >= t0 - tol and f.stamp + frame_period <= t1 + frame_period * 0.5 + tol]


def _nearest_pose(traj: Trajectory, t):
    i = int(np.argmin(np.abs(traj.stamps - t)))
    return traj[i]


def _period(frames, default=0.1):
    stamps = np.array([f.stamp for f in frames])
    if len(stamps) < 2:
        return default
    return float(np.median(np.diff(stamps)))


def run_odometry(spinning, cfg: PipelineConfig | None = None) -> Trajectory:
    """Built-in scan-to-map GICP odometry on the spinning scans."""
    cfg = cfg or PipelineConfig()
    op = cfg.odometry
    return incremental_odometry(
        list(spinning),
        cfg.registration,
        scan_leaf=op.scan_leaf,
        map_leaf=op.map_leaf,
        keyframe_distance=op.keyframe_distance,
        keyframe_angle=np.deg2rad(op.keyframe_angle_deg),
        max_keyframes=op.max_keyframes,
    )


@dataclass
class MapBuild:
    segments: list
    cache: list
    prior_map: PriorMap
    report: dict


def build_map(solid, imu: ImuStream, odometry: Trajectory, cfg: PipelineConfig | None = None) -> MapBuild:
    """Stationary gating, submap integration, merge and denoise."""
    cfg = cfg or PipelineConfig()
    solid = list(solid)
    if not solid:
        raise MissingInputError("no solid-state frames")
    segments = detect_stationary_segments(imu, odometry, cfg.thresholds)
    if not segments:
        raise ZeroSegmentsError("no stationary segments detected")
    period = _period(solid)
    extr = cfg.solid_extrinsic or Pose.identity()
    cache = SubmapCache()
    seg_report = []
    for t0, t1 in segments:
        frames = _frames_in(solid, t0, t1, period)
        entry = {"t_start": t0, "t_end": t1, "frames": len(frames)}
        if frames:
            sm = integrate_submap(frames, _nearest_pose(odometry, 0.5 * (t0 + t1)), extr)
            entry["points"] = len(sm.cloud)
            cache.append(sm)
        seg_report.append(entry)
    if not len(cache):
        raise ZeroSegmentsError("stationary segments contain no solid-state frames")
    prior = denoise_map(build_prior_map(cache, cfg), cfg)
    report = {
        "segments": seg_report,
        "merge_report": prior.merge_report,
        "prior_map": {
            "points": len(prior.cloud),
            "submaps_merged": prior.submap_count,
            "denoise_removed": prior.denoise_removed,
            "denoise_skipped": prior.denoise_skipped,
        },
    }
    return MapBuild(segments, list(cache), prior, report)


def localize(map_cloud: PointCloud, spinning, cfg: PipelineConfig | None = None, odometry: Trajectory | None = None):
    """NDT grid over the map and the tracked trajectory of the spinning scans.

    The first scan starts from the first odometry pose (identity without
    odometry); odometry increments seed later scans when the odometry has
    one pose per scan.
    """
    cfg = cfg or PipelineConfig()
    spinning = list(spinning)
    if not spinning:
        raise MissingInputError("no spinning-lidar scans")
    grid = build_grid(map_cloud, cfg.ndt)
    stamps = np.array([c.stamp for c in spinning])
    guide = None
    if odometry is not None and len(odometry) == len(spinning) and np.allclose(odometry.stamps, stamps, atol=1e-6):
        guide = odometry
    init = odometry[0] if odometry is not None and len(odometry) else Pose.identity()
    gt = track_sequence(grid, spinning, init, cfg.ndt, odometry=guide)
    return grid, gt


def base_report(cfg: PipelineConfig) -> dict:
    return {"tool": "gtforge", "version": __version__, "config": cfg.to_dict()}


def run_pipeline(
    spinning,
    solid,
    imu: ImuStream,
    cfg: PipelineConfig | None = None,
    odometry: Trajectory | None = None,
) -> PipelineResult:
    """Run every stage on in-memory data; see :func:`generate_ground_truth`."""
    cfg = cfg or PipelineConfig()
    spinning = list(spinning)
    if not spinning:
        raise MissingInputError("no spinning-lidar scans")
    timing = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timing[name] = now - clock
        clock = now

    odom_source = "external"
    if odometry is None:
        odometry = run_odometry(spinning, cfg)
        odom_source = "internal"
    lap("odometry")
    mb = build_map(solid, imu, odometry, cfg)
    lap("prior_map")
    grid, gt = localize(mb.prior_map.cloud, spinning, cfg, odometry)
    lap("localization")

    report = base_report(cfg)
    report["odometry"] = {"source": odom_source, "poses": len(odometry), "degraded": int(odometry.degraded.sum())}
    report.update(mb.report)
    report["prior_map"]["ndt_cells"] = len(grid)
    report["localization"] = {"poses": len(gt), "degraded": int(gt.degraded.sum())}
    return PipelineResult(odometry, mb.segments, mb.cache, mb.prior_map, grid, gt, report, timing)


@dataclass
class Dataset:
    spinning: list
    solid: list
    imu: ImuStream
    odometry: Trajectory | None
    manifest: dict


def _load_scans(directory, default_rate):
    files = sorted(glob.glob(os.path.join(directory, "*.pcd")))
    if not files:
        raise MissingInputError(f"no PCD files in {directory}")
    scans = [read_pcd(f) for f in files]
    stamps = [s.stamp for s in scans]
    if all(s == 0.0 for s in stamps) and len(scans) > 1:
        scans = [PointCloud(s.points, k / default_rate, s.frame_id, s.intensity) for k, s in enumerate(scans)]
    return scans


def load_dataset(dataset_dir) -> Dataset:
    if not os.path.isdir(dataset_dir):
        raise MissingInputError(f"dataset directory not found: {dataset_dir}")
    manifest = {}
    mpath = os.path.join(dataset_dir, "manifest.json")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            manifest = json.load(fh)
    rates = manifest.get("sensors", {})
    spin_rate = rates.get("spinning", {}).get("rate", 10.0)
    solid_rate = rates.get("solid_state", {}).get("rate", 10.0)
    spinning = _load_scans(os.path.join(dataset_dir, "scans_spinning"), spin_rate)
    solid = _load_scans(os.path.join(dataset_dir, "scans_solid"), solid_rate)
    imu = read_imu_csv(os.path.join(dataset_dir, "imu.csv"))
    opath = os.path.join(dataset_dir, "odometry.tum")
    odom = read_tum(opath) if os.path.exists(opath) else None
    return Dataset(spinning, solid, imu, odom, manifest)


def resolve_config(cfg: PipelineConfig, manifest: dict) -> PipelineConfig:
    """Take the solid-state extrinsic from the manifest unless configured."""
    if cfg.solid_extrinsic is None and "solid_extrinsic" in manifest:
        return dataclasses.replace(cfg, solid_extrinsic=pose_from_dict(manifest["solid_extrinsic"]))
    return cfg


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def generate_ground_truth(dataset_dir, cfg: PipelineConfig | None = None, out_dir=None) -> PipelineResult:
    """Full pipeline from a dataset directory to map, trajectory and report files.

    Odometry comes from ``odometry.tum`` when present, else from the built-in
    scan-to-map GICP odometry on the spinning scans.
    """
    cfg = cfg or PipelineConfig()
    out_dir = out_dir or dataset_dir
    ds = load_dataset(dataset_dir)
    cfg = resolve_config(cfg, ds.manifest)
    result = run_pipeline(ds.spinning, ds.solid, ds.imu, cfg, ds.odometry)
    os.makedirs(out_dir, exist_ok=True)
    write_pcd(os.path.join(out_dir, "prior_map.pcd"), result.prior_map.cloud)
    write_tum(os.path.join(out_dir, "ground_truth.tum"), result.ground_truth)
    write_json(os.path.join(out_dir, "report.json"), result.report)
    write_json(os.path.join(out_dir, "timing.json"), result.timing)
    return result
