"""CPU and memory sampling of a child process.

CPU is reported in percent of one core (two saturated cores read 200 %),
memory as resident set size in MB (2**20 bytes).
"""
from __future__ import annotations

import csv
import json
import subprocess
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import psutil

from .errors import ConfigError, DataError, SpawnError
from .trajectory import Trajectory, read_tum

MB = float(2**20)
DEFAULT_SAMPLE_PERIOD = 0.5


@dataclass
class ResourceTrace:
    t: list = field(default_factory=list)
    cpu_percent: list = field(default_factory=list)
    rss_mb: list = field(default_factory=list)
    returncode: int | None = None
    wall_time: float = 0.0
    command: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "cpu_percent", "rss_mb"])
            for row in zip(self.t, self.cpu_percent, self.rss_mb):
                w.writerow([repr(float(v)) for v in row])


@dataclass
class ResourceSummary:
    cpu_mean: float
    ram_mean: float
    cpu_max: float = 0.0
    ram_max: float = 0.0
    pose_rate: float | None = None
    replay_factor: float | None = None
    samples: int = 0
    wall_time: float = 0.0
    returncode: int | None = None

    def to_dict(self):
        return {
            "cpu_mean_percent_of_one_core": self.cpu_mean,
            "cpu_max_percent_of_one_core": self.cpu_max,
            "ram_mean_rss_mb": self.ram_mean,
            "ram_max_rss_mb": self.ram_max,
            "pose_rate_hz": self.pose_rate,
            "replay_factor": self.replay_factor,
            "samples": self.samples,
            "wall_time_s": self.wall_time,
            "returncode": self.returncode,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _tree_usage(proc: psutil.Process):
    """Cumulative CPU seconds and total RSS of a process and its descendants."""
    cpu = 0.0
    rss = 0
    try:
        members = [proc] + proc.children(recursive=True)
    except psutil.Error:
        return None
    for p in members:
        try:
            with p.oneshot():
                ct = p.cpu_times()
                cpu += ct.user + ct.system
                rss += p.memory_info().rss
        except psutil.Error:
            continue
    return cpu, rss


def monitor_process(command, sample_period=DEFAULT_SAMPLE_PERIOD, timeout=None, **popen_kwargs) -> ResourceTrace:
    """Run ``command`` and sample its CPU and RSS until it exits.

    Each sample's CPU figure is the increase in cumulative CPU time (user +
    system, child processes included) divided by the wall time since the
    previous sample. A non-zero exit status is recorded in
    ``trace.returncode``; the trace collected so far is still returned.
    """
    if not sample_period > 0:
        raise ConfigError("sample_period must be positive")
    if isinstance(command, str):
        command = [command]
    command = [str(c) for c in command]
    try:
        child = subprocess.Popen(command, **popen_kwargs)
    except OSError as exc:
        raise SpawnError(f"cannot start {command[0]!r}: {exc}") from exc
    trace = ResourceTrace(command=command)
    t0 = time.perf_counter()
    proc = psutil.Process(child.pid)
    done = threading.Event()

    def sampler():
        last_t, last_cpu = t0, 0.0
        while not done.wait(sample_period):
            usage = _tree_usage(proc)
            now = time.perf_counter()
            if usage is None or now <= last_t:
                continue
            cpu, rss = usage
            trace.t.append(now - t0)
            trace.cpu_percent.append(max(0.0, 100.0 * (cpu - last_cpu) / (now - last_t)))
            trace.rss_mb.append(rss / MB)
            last_t, last_cpu = now, cpu

    th = threading.Thread(target=sampler, name="gtforge-sampler", daemon=True)
    th.start()
    try:
        trace.returncode = child.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        child.kill()
        trace.returncode = child.wait()
    finally:
        done.set()
        th.join()
    trace.wall_time = time.perf_counter() - t0
    return trace


def measure_pose_rate(poses, wall_duration) -> float:
    """Poses per second of wall time; ``poses`` is a Trajectory, a TUM path or a count."""
    if isinstance(poses, (str, bytes)) or hasattr(poses, "__fspath__"):
        poses = read_tum(poses)
    n = len(poses) if isinstance(poses, Trajectory) else int(poses)
    if n < 2:
        raise DataError(f"need at least 2 poses to measure a rate, got {n}")
    if not wall_duration > 0:
        raise ConfigError("wall_duration must be positive")
    return n / float(wall_duration)


def summarize(trace: ResourceTrace, pose_count=None, data_duration=None) -> ResourceSummary:
    """Mean and peak usage; optional pose rate and replay factor.

    ``replay_factor`` is ``data_duration / wall_time``: how many times faster
    than real time the recorded data was processed.
    """
    cpu = np.asarray(trace.cpu_percent, dtype=float)
    ram = np.asarray(trace.rss_mb, dtype=float)
    s = ResourceSummary(
        cpu_mean=float(cpu.mean()) if len(cpu) else 0.0,
        ram_mean=float(ram.mean()) if len(ram) else 0.0,
        cpu_max=float(cpu.max()) if len(cpu) else 0.0,
        ram_max=float(ram.max()) if len(ram) else 0.0,
        samples=len(trace),
        wall_time=trace.wall_time,
        returncode=trace.returncode,
    )
    if pose_count is not None and trace.wall_time > 0:
        s.pose_rate = measure_pose_rate(pose_count, trace.wall_time)
    if data_duration is not None and trace.wall_time > 0:
        s.replay_factor = float(data_duration) / trace.wall_time
    return s
