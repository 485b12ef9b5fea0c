"""Synthetic multi-modal lidar + IMU data over scenes made of planar rectangles.

All randomness is drawn from generators seeded with ``(seed, stream, frame)``
so any single frame can be regenerated on its own.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import PointCloud, Pose, pose_from_dict, pose_to_dict, so3_exp, so3_log  # noqa: F401
from .pcd import write_pcd
from .pipeline import ImuStream, write_imu_csv
from .trajectory import Trajectory, write_tum

GRAVITY = 9.81
GOLDEN = (1 + 5**0.5) / 2

_STREAM_SPINNING = 1
_STREAM_SOLID = 2
_STREAM_IMU = 3


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class Rectangle:
    corner: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("corner", "u", "v"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"rectangle {name} must be finite")
            object.__setattr__(self, name, arr)
        n = np.cross(self.u, self.v)
        if np.linalg.norm(n) <= 1e-12 * np.linalg.norm(self.u) * np.linalg.norm(self.v) or np.linalg.norm(n) == 0:
            raise ConfigError("rectangle edge vectors are parallel or zero")

    @property
    def normal(self):
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def vertices(self):
        c, u, v = self.corner, self.u, self.v
        return np.array([c, c + u, c + u + v, c + v])

    def distance(self, points):
        """Euclidean distance from each point to this (finite) parallelogram."""
        p = np.asarray(points, dtype=float).reshape(-1, 3) - self.corner
        u, v = self.u, self.v
        G = np.array([[u @ u, u @ v], [u @ v, v @ v]])
        a, b = np.linalg.solve(G, np.stack([p @ u, p @ v]))
        inside = (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        plane = np.abs(p @ self.normal)
        edges = []
        for start, e in ((np.zeros(3), u), (np.zeros(3), v), (u, v), (v, u)):
            s = np.clip(((p - start) @ e) / (e @ e), 0.0, 1.0)
            edges.append(np.linalg.norm(p - start - s[:, None] * e, axis=1))
        return np.where(inside, plane, np.min(edges, axis=0))


@dataclass(frozen=True)
class Scene:
    name: str
    rectangles: tuple

    def bounds(self):
        v = np.concatenate([r.vertices() for r in self.rectangles])
        return v.min(axis=0), v.max(axis=0)

    def distance(self, points):
        """Distance from each point to the nearest scene surface."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.min(np.stack([r.distance(points) for r in self.rectangles]), axis=0)


def _box_faces(lo, hi, skip=()):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dx, dy, dz = hi - lo
    X, Y, Z = np.eye(3)
    faces = {
        "floor": Rectangle(lo, dx * X, dy * Y),
        "ceiling": Rectangle(lo + dz * Z, dx * X, dy * Y),
        "x_min": Rectangle(lo, dy * Y, dz * Z),
        "x_max": Rectangle(lo + dx * X, dy * Y, dz * Z),
        "y_min": Rectangle(lo, dx * X, dz * Z),
        "y_max": Rectangle(lo + dy * Y, dx * X, dz * Z),
    }
    return [f for k, f in faces.items() if k not in skip]


def _pillar(x, y_wall, side, z0, z1, width=0.4, depth=0.3):
    """Three visible faces of a rectangular pillar standing against a y-wall."""
    inward = -np.sign(y_wall) if side == 0 else side
    y_face = y_wall + inward * depth
    h = z1 - z0
    X, Y, Z = np.eye(3)
    return [
        Rectangle([x - width / 2, y_face, z0], width * X, h * Z),
        Rectangle([x - width / 2, y_wall, z0], (y_face - y_wall) * Y, h * Z),
        Rectangle([x + width / 2, y_wall, z0], (y_face - y_wall) * Y, h * Z),
    ]


def _preset(name):
    if name == "room_10x8x3":
        return _box_faces([-3.0, -3.0, -1.2], [7.0, 5.0, 1.8])
    if name == "corridor_40m":
        rects = _box_faces([-2.0, -1.25, -1.2], [38.0, 1.25, 1.8])
        for i, x in enumerate(np.arange(1.0, 37.0, 3.0)):
            wall = 1.25 if i % 2 == 0 else -1.25
            rects += _pillar(float(x), wall, 0, -1.2, 1.8)
        return rects
    if name == "open_road":
        X, Y, Z = np.eye(3)
        rects = [Rectangle([-20.0, -15.0, -1.5], 120 * X, 30 * Y)]
        for x in range(-20, 100, 12):
            rects.append(Rectangle([x, 9.0, -1.5], 10 * X, 8 * Z))
            rects.append(Rectangle([x + 4.0, -10.0, -1.5], 10 * X, 6 * Z))
        for x in range(0, 90, 15):
            rects += _box_faces([x + 3.0, 3.0, -1.5], [x + 7.5, 4.8, 0.0], skip=("floor",))
        return rects
    if name == "forest":
        rng = np.random.default_rng(20221107)
        X, Y, Z = np.eye(3)
        rects = [Rectangle([-25.0, -25.0, -1.3], 50 * X, 50 * Y)]
        for _ in range(60):
            cx, cy = rng.uniform(-22, 22, size=2)
            if np.hypot(cx, cy) < 2.0:
                continue
            w = rng.uniform(0.2, 0.5)
            h = rng.uniform(4.0, 9.0)
            rects.append(Rectangle([cx - w / 2, cy, -1.3], w * X, h * Z))
            rects.append(Rectangle([cx, cy - w / 2, -1.3], w * Y, h * Z))
        return rects
    raise ConfigError(f"unknown scene preset {name!r}")


PRESETS = ("room_10x8x3", "corridor_40m", "open_road", "forest")

# default stop-and-go routes: legs of (x, y, z, yaw_deg), pause length, speed
DEFAULT_ROUTES = {
    "room_10x8x3": dict(legs=[(2.0, 0.0, 0.0, 0.0), (2.0, 1.5, 0.1, 20.0), (0.0, 0.0, 0.0, 0.0)], stop_duration=3.0, speed=0.4),
    "corridor_40m": dict(legs=[(5.0 * k, 0.0, 0.0, 0.0) for k in range(1, 8)], stop_duration=2.0, speed=1.0),
    "open_road": dict(legs=[(10.0 * k, 0.0, 0.0, 0.0) for k in range(1, 6)], stop_duration=2.0, speed=2.0),
    "forest": dict(legs=[(4.0, 0.0, 0.0, 0.0), (8.0, 2.0, 0.0, 20.0), (12.0, 2.0, 0.0, 0.0)], stop_duration=2.0, speed=1.0),
}


def build_scene(spec, name=None) -> Scene:
    """Build a scene from a preset name or a list of rectangles.

    Rectangles may be :class:`Rectangle` objects, ``(corner, u, v)`` triples
    or dicts with those keys.
    """
    if isinstance(spec, str):
        return Scene(spec, tuple(_preset(spec)))
    rects = []
    for r in spec:
        if isinstance(r, Rectangle):
            rects.append(r)
        elif isinstance(r, dict):
            rects.append(Rectangle(r["corner"], r["u"], r["v"]))
        else:
            rects.append(Rectangle(*r))
    if not rects:
        raise ConfigError("a scene needs at least one surface")
    return Scene(name or "custom", tuple(rects))


# --------------------------------------------------------------------------
# sensors


@dataclass(frozen=True)
class SensorSpec:
    name: str
    kind: str  # "spinning" | "solid_state"
    channels: int = 0
    fov_h: float = 360.0
    fov_v: float = 30.0
    res_h: float = 0.4
    res_v: float = 2.0
    points_per_second: int = 300_000
    max_range: float = 100.0
    range_noise_sigma: float = 0.02
    rate: float = 10.0

    def __post_init__(self):
        if self.kind not in ("spinning", "solid_state"):
            raise ConfigError(f"unknown sensor kind {self.kind!r}")
        if not (0 < self.fov_h <= 360 and 0 < self.fov_v <= 360):
            raise ConfigError("field of view must be within (0, 360] degrees")
        if not (self.max_range > 0 and self.rate > 0 and self.range_noise_sigma >= 0):
            raise ConfigError("sensor ranges and rates must be positive")
        if self.kind == "spinning" and not (self.channels >= 1 and self.res_h > 0):
            raise ConfigError("spinning sensors need channels >= 1 and res_h > 0")
        if self.kind == "solid_state" and not self.points_per_second > 0:
            raise ConfigError("solid-state sensors need points_per_second > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown sensor fields: {sorted(unknown)}")
        return cls(**d)


SENSOR_PRESETS = {
    "vlp16": SensorSpec("vlp16", "spinning", 16, 360.0, 30.0, 0.4, 2.0, 300_000, 100.0),
    "os1_64": SensorSpec("os1_64", "spinning", 64, 360.0, 45.0, 0.18, 0.7, 1_310_720, 120.0),
    "os0_128": SensorSpec("os0_128", "spinning", 128, 360.0, 90.0, 0.18, 0.7, 2_621_440, 50.0),
    "horizon": SensorSpec("horizon", "solid_state", 0, 81.7, 25.1, 0.0, 0.0, 240_000, 260.0),
    "avia": SensorSpec("avia", "solid_state", 0, 70.4, 77.2, 0.0, 0.0, 240_000, 450.0),
}


def sensor_preset(name, **overrides):
    try:
        base = SENSOR_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown sensor preset {name!r}") from None
    d = base.to_dict()
    d.update(overrides)
    return SensorSpec.from_dict(d)


def cast_rays(scene: Scene, origin, directions, max_range):
    """Distance along each unit ray to the nearest surface (``inf`` on a miss)."""
    origin = np.asarray(origin, dtype=float)
    D = np.asarray(directions, dtype=float)
    best = np.full(len(D), np.inf)
    for r in scene.rectangles:
        n = np.cross(r.u, r.v)
        denom = D @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((r.corner - origin) @ n) / denom
        ok = np.isfinite(s) & (s > 1e-9) & (s < best)
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        p = origin + s[idx, None] * D[idx] - r.corner
        uu, uv, vv = r.u @ r.u, r.u @ r.v, r.v @ r.v
        pu, pv = p @ r.u, p @ r.v
        det = uu * vv - uv * uv
        a = (vv * pu - uv * pv) / det
        b = (uu * pv - uv * pu) / det
        inside = (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        best[idx[inside]] = s[idx[inside]]
    best[best > max_range] = np.inf
    return best


def _frame_rng(seed, stream, index):
    return np.random.default_rng([int(seed), stream, int(index)])


def _directions(az, el):
    ce = np.cos(el)
    return np.column_stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)])


def spinning_directions(spec: SensorSpec):
    n_az = int(round(spec.fov_h / spec.res_h))
    az = np.deg2rad(np.arange(n_az) * spec.res_h - (180.0 if spec.fov_h >= 360 else spec.fov_h / 2))
    if spec.channels == 1:
        el = np.zeros(1)
    else:
        el = np.deg2rad(np.linspace(-spec.fov_v / 2, spec.fov_v / 2, spec.channels))
    A, E = np.meshgrid(az, el, indexing="ij")
    return _directions(A.ravel(), E.ravel())


ROSETTE_BASE_HZ = 173.0


def rosette_directions(spec: SensorSpec, frame_time, duration=None):
    """Ray directions of one solid-state frame.

    Two counter-rotating phasors with golden-ratio frequency ratio trace a
    rosette that never repeats; the pattern is sampled at absolute times
    ``frame_time + m / points_per_second`` so later frames fill gaps left
    by earlier ones.
    """
    duration = 1.0 / spec.rate if duration is None else duration
    n = int(round(spec.points_per_second * duration))
    tau = frame_time + np.arange(n) / spec.points_per_second
    w1 = 2 * np.pi * ROSETTE_BASE_HZ
    w2 = -GOLDEN * w1
    x = 0.5 * (np.cos(w1 * tau) + np.cos(w2 * tau))
    y = 0.5 * (np.sin(w1 * tau) + np.sin(w2 * tau))
    az = np.deg2rad(np.clip(x, -1, 1) * spec.fov_h / 2)
    el = np.deg2rad(np.clip(y, -1, 1) * spec.fov_v / 2)
    return _directions(az, el)


def _scan(scene, sensor_pose: Pose, dirs_body, spec, rng, stamp, frame_id):
    R = sensor_pose.R
    dirs_world = dirs_body @ R.T
    r = cast_rays(scene, sensor_pose.translation, dirs_world, spec.max_range)
    hit = np.isfinite(r)
    r = r[hit]
    if spec.range_noise_sigma > 0:
        r = r + rng.normal(0.0, spec.range_noise_sigma, size=r.shape)
    pts = dirs_body[hit] * r[:, None]
    return PointCloud(pts, stamp, frame_id)


def simulate_spinning_scan(scene, pose: Pose, spec: SensorSpec, seed=0, frame_index=0, stamp=None) -> PointCloud:
    """One revolution of a spinning lidar at ``pose``, in the sensor frame."""
    if spec.kind != "spinning":
        raise ConfigError("simulate_spinning_scan needs a spinning sensor")
    rng = _frame_rng(seed, _STREAM_SPINNING, frame_index)
    return _scan(scene, pose, spinning_directions(spec), spec, rng, pose.t if stamp is None else stamp, spec.name)


def simulate_solid_state_scan(scene, pose: Pose, spec: SensorSpec, frame_time, seed=0, frame_index=None) -> PointCloud:
    """One solid-state frame starting at absolute time ``frame_time``."""
    if spec.kind != "solid_state":
        raise ConfigError("simulate_solid_state_scan needs a solid_state sensor")
    if frame_index is None:
        frame_index = int(round(frame_time * spec.rate))
    rng = _frame_rng(seed, _STREAM_SOLID, frame_index)
    return _scan(scene, pose, rosette_directions(spec, frame_time), spec, rng, frame_time, spec.name)


# --------------------------------------------------------------------------
# motion


@dataclass(frozen=True)
class MotionScript:
    """Waypoints ``(t, Pose)`` joined by constant linear and angular velocity.

    Consecutive waypoints with identical poses form stop windows.
    """

    waypoints: tuple

    def __post_init__(self):
        wps = tuple((float(t), p) for t, p in self.waypoints)
        if not wps:
            raise ConfigError("motion script needs at least one waypoint")
        ts = [t for t, _ in wps]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("waypoint times must be increasing")
        object.__setattr__(self, "waypoints", wps)

    @property
    def start(self):
        return self.waypoints[0][0]

    @property
    def end(self):
        return self.waypoints[-1][0]

    @property
    def stop_windows(self):
        out = []
        for (ta, pa), (tb, pb) in zip(self.waypoints, self.waypoints[1:]):
            if np.allclose(pa.translation, pb.translation, atol=1e-12) and pa.angle_to(pb) < 1e-12:
                if out and abs(out[-1][1] - ta) < 1e-12:
                    out[-1] = (out[-1][0], tb)
                else:
                    out.append((ta, tb))
        return out

    def _segment(self, t):
        ts = np.array([w[0] for w in self.waypoints])
        i = int(np.searchsorted(ts, t, side="right")) - 1
        return min(max(i, 0), max(len(ts) - 2, 0))

    def pose_at(self, t) -> Pose:
        if len(self.waypoints) == 1:
            return self.waypoints[0][1].with_stamp(t)
        i = self._segment(t)
        (ta, pa), (tb, pb) = self.waypoints[i], self.waypoints[i + 1]
        s = np.clip((t - ta) / (tb - ta), 0.0, 1.0)
        rel = so3_log(pa.R.T @ pb.R)
        R = pa.R @ so3_exp(s * rel)
        trans = (1 - s) * pa.translation + s * pb.translation
        return Pose.from_rt(R, trans, t)

    def velocity_at(self, t):
        """World linear velocity and body angular velocity on the segment containing ``t``."""
        if len(self.waypoints) == 1 or t < self.start or t >= self.end:
            return np.zeros(3), np.zeros(3)
        i = self._segment(t)
        (ta, pa), (tb, pb) = self.waypoints[i], self.waypoints[i + 1]
        dt = tb - ta
        return (pb.translation - pa.translation) / dt, so3_log(pa.R.T @ pb.R) / dt

    def trajectory(self, stamps) -> Trajectory:
        return Trajectory.from_poses([self.pose_at(t) for t in stamps])


def stop_and_go_script(legs, stop_duration=2.0, speed=0.5, start_stop=None, start=None):
    """Script that stops at each position of ``legs``.

    ``legs`` is a list of ``(x, y, z, yaw_deg)`` targets reached in order at
    ``speed`` m/s, each followed by a ``stop_duration`` pause. The script
    starts at ``start`` (default identity) with an initial pause of
    ``start_stop`` seconds (default ``stop_duration``).
    """
    start = start or Pose.identity()
    start_stop = stop_duration if start_stop is None else start_stop
    t = 0.0
    wps = [(t, start)]
    cur = start
    if start_stop > 0:
        t += start_stop
        wps.append((t, cur))
    for x, y, z, yaw in legs:
        nxt = Pose.from_rotvec([0.0, 0.0, np.deg2rad(yaw)], [x, y, z])
        dist = np.linalg.norm(nxt.translation - cur.translation)
        ang = cur.angle_to(nxt)
        t += max(dist / speed, ang / np.deg2rad(30.0), 0.1)
        wps.append((t, nxt))
        if stop_duration > 0:
            t += stop_duration
            wps.append((t, nxt))
        cur = nxt
    return MotionScript(tuple(wps))


def default_script(scene_name):
    """Stop-and-go route used when no legs are configured for a preset."""
    try:
        route = DEFAULT_ROUTES[scene_name]
    except KeyError:
        raise ConfigError(f"no default route for scene {scene_name!r}; configure legs") from None
    return stop_and_go_script(**route)


def synthesize_imu(script: MotionScript, rate=200.0, noise_accel=0.001, noise_gyro=0.0005, seed=0) -> ImuStream:
    """Specific force and angular rate in the body frame.

    Linear acceleration is the central difference of the piecewise-constant
    velocity over one sample period, so it is zero except at the samples
    bracketing a velocity change.
    """
    if not rate > 0:
        raise ConfigError("IMU rate must be positive")
    n = int(np.floor((script.end - script.start) * rate + 1e-9)) + 1
    t = script.start + np.arange(n) / rate
    dt = 1.0 / rate
    acc = np.empty((n, 3))
    gyr = np.empty((n, 3))
    up = np.array([0.0, 0.0, GRAVITY])
    for k, tk in enumerate(t):
        v_after, w = script.velocity_at(tk + dt / 2)
        v_before, _ = script.velocity_at(tk - dt / 2)
        _, w = script.velocity_at(tk)
        a_world = (v_after - v_before) / dt
        R = script.pose_at(tk).R
        acc[k] = R.T @ (a_world + up)
        gyr[k] = w
    rng = _frame_rng(seed, _STREAM_IMU, 0)
    if noise_accel > 0:
        acc = acc + rng.normal(0.0, noise_accel, size=acc.shape)
    if noise_gyro > 0:
        gyr = gyr + rng.normal(0.0, noise_gyro, size=gyr.shape)
    return ImuStream(t, acc, gyr)


# --------------------------------------------------------------------------
# datasets


DEFAULT_SOLID_EXTRINSIC = Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.1, 0.0, -0.1]))


@dataclass
class SimDataset:
    spinning: list
    solid: list
    imu: ImuStream
    truth: Trajectory
    solid_extrinsic: Pose
    stop_windows: list
    manifest: dict = field(default_factory=dict)


def simulate_dataset(
    scene: Scene,
    script: MotionScript,
    spinning_spec: SensorSpec | None = None,
    solid_spec: SensorSpec | None = None,
    seed=0,
    solid_extrinsic: Pose | None = None,
    imu_rate=200.0,
    noise_accel=0.001,
    noise_gyro=0.0005,
) -> SimDataset:
    """Generate every stream of a dataset in memory.

    Spinning scans and solid-state frames are stamped ``k / rate`` and taken
    at the platform pose at that stamp (no intra-frame motion).
    """
    spinning_spec = spinning_spec or SENSOR_PRESETS["os0_128"]
    solid_spec = solid_spec or SENSOR_PRESETS["avia"]
    extr = solid_extrinsic or DEFAULT_SOLID_EXTRINSIC
    duration = script.end - script.start
    ns = int(np.floor(duration * spinning_spec.rate + 1e-9)) + 1
    spin_t = script.start + np.arange(ns) / spinning_spec.rate
    spinning = [
        simulate_spinning_scan(scene, script.pose_at(t), spinning_spec, seed, k, stamp=t) for k, t in enumerate(spin_t)
    ]
    nd = int(np.floor(duration * solid_spec.rate + 1e-9))
    solid_t = script.start + np.arange(nd) / solid_spec.rate
    solid = [
        simulate_solid_state_scan(scene, script.pose_at(t) @ extr, solid_spec, t, seed, k) for k, t in enumerate(solid_t)
    ]
    imu = synthesize_imu(script, imu_rate, noise_accel, noise_gyro, seed)
    manifest = {
        "seed": int(seed),
        "scene": scene.name,
        "sensors": {"spinning": spinning_spec.to_dict(), "solid_state": solid_spec.to_dict()},
        "solid_extrinsic": pose_to_dict(extr),
        "imu": {"rate": float(imu_rate), "noise_accel": float(noise_accel), "noise_gyro": float(noise_gyro)},
        "stop_windows": [[float(a), float(b)] for a, b in script.stop_windows],
        "counts": {"spinning": len(spinning), "solid_state": len(solid), "imu": len(imu)},
    }
    return SimDataset(spinning, solid, imu, script.trajectory(spin_t), extr, script.stop_windows, manifest)


def write_dataset(ds: SimDataset, out_dir):
    """Write a dataset in the pipeline's directory layout."""
    try:
        os.makedirs(os.path.join(out_dir, "scans_spinning"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "scans_solid"), exist_ok=True)
        for k, c in enumerate(ds.spinning):
            write_pcd(os.path.join(out_dir, "scans_spinning", f"{k:06d}.pcd"), c)
        for k, c in enumerate(ds.solid):
            write_pcd(os.path.join(out_dir, "scans_solid", f"{k:06d}.pcd"), c)
        write_imu_csv(os.path.join(out_dir, "imu.csv"), ds.imu)
        write_tum(os.path.join(out_dir, "truth.tum"), ds.truth)
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(ds.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise DataError(f"failed writing dataset to {out_dir}: {exc}") from exc
    return out_dir


def export_dataset(scene, script, spinning_spec=None, solid_spec=None, seed=0, out_dir=".", **kwargs):
    ds = simulate_dataset(scene, script, spinning_spec, solid_spec, seed, **kwargs)
    return write_dataset(ds, out_dir)
