"""Stamped pose sequences and the TUM text format."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, MissingInputError
from .geometry import Pose


@dataclass(frozen=True)
class Trajectory:
    """Poses with strictly increasing stamps.

    ``degraded`` flags poses that came from a motion model rather than a
    successful registration.
    """

    stamps: np.ndarray
    rotations: np.ndarray  # (N, 4) w, x, y, z
    translations: np.ndarray  # (N, 3)
    degraded: np.ndarray | None = None

    def __post_init__(self):
        stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        rot = np.asarray(self.rotations, dtype=float).reshape(-1, 4)
        trans = np.asarray(self.translations, dtype=float).reshape(-1, 3)
        if not (len(stamps) == len(rot) == len(trans)):
            raise DataError("trajectory arrays have mismatched lengths")
        if len(stamps) > 1 and np.any(np.diff(stamps) <= 0):
            raise DataError("trajectory timestamps must be strictly increasing")
        if not (np.all(np.isfinite(stamps)) and np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise DataError("trajectory contains non-finite values")
        rot = rot / np.linalg.norm(rot, axis=1, keepdims=True) if len(rot) else rot
        deg = np.zeros(len(stamps), dtype=bool) if self.degraded is None else np.asarray(self.degraded, dtype=bool)
        object.__setattr__(self, "stamps", stamps)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "translations", trans)
        object.__setattr__(self, "degraded", deg)

    @classmethod
    def from_poses(cls, poses, degraded=None):
        poses = list(poses)
        if not poses:
            return cls(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)), degraded)
        return cls(
            np.array([p.t for p in poses]),
            np.array([p.rotation for p in poses]),
            np.array([p.translation for p in poses]),
            degraded,
        )

    def __len__(self):
        return len(self.stamps)

    def __getitem__(self, i):
        return Pose(self.rotations[i], self.translations[i], self.stamps[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def poses(self):
        return list(self)

    def subset(self, index):
        return Trajectory(self.stamps[index], self.rotations[index], self.translations[index], self.degraded[index])


def write_tum(path, traj: Trajectory):
    """Write ``t tx ty tz qx qy qz qw`` lines with round-trippable floats."""
    lines = ["# t tx ty tz qx qy qz qw"]
    for t, q, p in zip(traj.stamps, traj.rotations, traj.translations):
        vals = [t, p[0], p[1], p[2], q[1], q[2], q[3], q[0]]
        lines.append(" ".join(repr(float(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tum(path) -> Trajectory:
    if not os.path.exists(path):
        raise MissingInputError(f"no such trajectory file: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        return Trajectory.from_poses([])
    a = np.array(rows)
    quats = np.column_stack([a[:, 7], a[:, 4], a[:, 5], a[:, 6]])
    return Trajectory(a[:, 0], quats, a[:, 1:4])
