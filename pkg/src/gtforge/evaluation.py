"""Trajectory association, frame transfer, Umeyama alignment and APE statistics.

All distances are in meters. Standard deviations are population (``1/N``)
deviations.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, DegenerateAlignmentError, NoAssociationError
from .geometry import Pose, kabsch, quat_to_matrix
from .trajectory import Trajectory

DEFAULT_MAX_DT = 0.02


def associate_timestamps(est: Trajectory, ref: Trajectory, max_dt=DEFAULT_MAX_DT):
    """One-to-one pairing of ``est`` and ``ref`` poses by timestamp.

    Candidate pairs with ``|dt| <= max_dt`` are accepted greedily in order of
    increasing ``|dt|`` (ties broken by est index, then ref index). Returns a
    list of ``(i_est, j_ref)`` sorted by ``i_est``.
    """
    if len(est) == 0 or len(ref) == 0:
        raise NoAssociationError("cannot associate an empty trajectory")
    ts_e, ts_r = est.stamps, ref.stamps
    lo = np.searchsorted(ts_r, ts_e - max_dt, side="left")
    hi = np.searchsorted(ts_r, ts_e + max_dt, side="right")
    ii = np.repeat(np.arange(len(ts_e)), hi - lo)
    jj = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if len(ii) else np.zeros(0, int)
    dt = np.abs(ts_e[ii] - ts_r[jj])
    keep = dt <= max_dt
    ii, jj, dt = ii[keep], jj[keep], dt[keep]
    order = np.lexsort((jj, ii, dt))
    used_e = np.zeros(len(ts_e), bool)
    used_r = np.zeros(len(ts_r), bool)
    pairs = []
    for k in order:
        i, j = ii[k], jj[k]
        if not used_e[i] and not used_r[j]:
            used_e[i] = used_r[j] = True
            pairs.append((int(i), int(j)))
    if not pairs:
        raise NoAssociationError(f"no timestamp pairs within {max_dt} s")
    pairs.sort()
    return pairs


def apply_reference_transform(traj: Trajectory, extrinsic: Pose) -> Trajectory:
    """Express every pose in another body frame: ``P' = X P X^-1``."""
    X = extrinsic.matrix()
    Xi = extrinsic.inverse().matrix()
    poses = []
    for p in traj:
        poses.append(Pose.from_matrix(X @ p.matrix() @ Xi, p.t))
    return Trajectory.from_poses(poses, traj.degraded)


def umeyama_alignment(est, ref) -> Pose:
    """Rigid (no scale) ``S`` minimizing ``sum ||ref_i - (R est_i + t)||^2``."""
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    ref = np.asarray(ref, dtype=float).reshape(-1, 3)
    if len(est) != len(ref):
        raise DataError("umeyama_alignment needs paired point sets")
    if len(est) < 3:
        raise DegenerateAlignmentError(f"need at least 3 pairs, got {len(est)}")
    sv = np.linalg.svd(est - est.mean(axis=0), compute_uv=False)
    sv_ref = np.linalg.svd(ref - ref.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300) or sv_ref[1] <= 1e-9 * max(sv_ref[0], 1e-300):
        raise DegenerateAlignmentError("points are collinear or coincident")
    R, t, _ = kabsch(est, ref)
    return Pose.from_rt(R, t)


@dataclass
class ApeStats:
    mean: float
    std: float
    rmse: float
    median: float
    max: float
    min: float
    per_pose_errors: list = field(default_factory=list)  # (t, error_m)
    alignment: Pose | None = None
    rotation: dict | None = None
    units: str = "m"

    def to_dict(self):
        d = {
            "units": self.units,
            "std_kind": "population",
            "pairs": len(self.per_pose_errors),
            "mean": self.mean,
            "std": self.std,
            "rmse": self.rmse,
            "median": self.median,
            "max": self.max,
            "min": self.min,
        }
        if self.alignment is not None:
            d["alignment"] = {
                "translation": [float(v) for v in self.alignment.translation],
                "rotation_wxyz": [float(v) for v in self.alignment.rotation],
            }
        if self.rotation is not None:
            d["rotation_deg"] = self.rotation
        return d

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "ape_m"])
            for t, e in self.per_pose_errors:
                w.writerow([repr(float(t)), repr(float(e))])


def _stats(errors):
    e = np.asarray(errors, dtype=float)
    return dict(
        mean=float(np.mean(e)),
        std=float(np.std(e)),
        rmse=float(np.sqrt(np.mean(e**2))),
        median=float(np.median(e)),
        max=float(np.max(e)),
        min=float(np.min(e)),
    )


def compute_ape(est: Trajectory, ref: Trajectory, align="none", max_dt=DEFAULT_MAX_DT, rotational=False) -> ApeStats:
    """Absolute position error of ``est`` against ``ref``.

    ``align="umeyama"`` first maps ``est`` onto ``ref`` with the best rigid
    transform over the associated positions. ``rotational=True`` adds
    rotation-angle statistics (degrees) under ``ApeStats.rotation``.
    """
    if align not in ("none", "umeyama"):
        raise ConfigError(f"unknown alignment {align!r}")
    pairs = associate_timestamps(est, ref, max_dt)
    ie = np.array([p[0] for p in pairs])
    jr = np.array([p[1] for p in pairs])
    pe = est.translations[ie]
    pr = ref.translations[jr]
    S = None
    if align == "umeyama":
        S = umeyama_alignment(pe, pr)
        pe = S.apply(pe)
    err = np.linalg.norm(pr - pe, axis=1)
    stats = ApeStats(**_stats(err), per_pose_errors=list(zip(est.stamps[ie].tolist(), err.tolist())), alignment=S)
    if rotational:
        RS = S.R if S is not None else np.eye(3)
        ang = []
        for a, b in zip(ie, jr):
            Re = RS @ quat_to_matrix(est.rotations[a])
            Rr = quat_to_matrix(ref.rotations[b])
            c = np.clip((np.trace(Rr.T @ Re) - 1) / 2, -1.0, 1.0)
            ang.append(np.degrees(np.arccos(c)))
        stats.rotation = _stats(ang)
    return stats


class AxisDeviation(NamedTuple):
    x: float
    y: float
    z: float
    overall: float


def stationary_deviation(gt: Trajectory, window) -> AxisDeviation:
    """Population std of x, y, z over poses with ``t0 <= t <= t1``."""
    t0, t1 = window
    sel = (gt.stamps >= t0) & (gt.stamps <= t1)
    if np.count_nonzero(sel) < 2:
        raise DataError("need at least two poses inside the window")
    sd = np.std(gt.translations[sel], axis=0)
    return AxisDeviation(float(sd[0]), float(sd[1]), float(sd[2]), float(np.sqrt(np.sum(sd**2))))
