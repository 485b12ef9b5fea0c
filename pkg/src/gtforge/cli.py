"""Command line: ``gtforge {simulate,odometry,build-map,localize,eval,monitor}``.

Exit status: 0 on success, 2 for usage or configuration errors, 3 for data
errors, 4 for numerical failures. ``GTFORGE_LOG`` sets the log level
(DEBUG, INFO, WARNING, ...; default WARNING).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__
from .errors import ConfigError, GtForgeError, MissingInputError
from .evaluation import DEFAULT_MAX_DT, compute_ape, stationary_deviation
from .geometry import pose_from_dict
from .monitor import DEFAULT_SAMPLE_PERIOD, monitor_process, summarize
from .pcd import read_pcd, write_pcd
from .pipeline import (
    PipelineConfig,
    _strict,
    base_report,
    build_map,
    load_dataset,
    localize,
    resolve_config,
    run_odometry,
    write_json,
)
from .simulation import (
    DEFAULT_SOLID_EXTRINSIC,
    SensorSpec,
    build_scene,
    default_script,
    export_dataset,
    sensor_preset,
    stop_and_go_script,
)
from .trajectory import read_tum, write_tum

log = logging.getLogger("gtforge")


# --------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class SimulationConfig:
    scene: str = "room_10x8x3"
    legs: list | None = None
    stop_duration: float = 2.0
    speed: float = 0.5
    start_stop: float | None = None
    imu_rate: float = 200.0
    noise_accel: float = 0.001
    noise_gyro: float = 0.0005
    solid_extrinsic: dict | None = None


@dataclass(frozen=True)
class EvalConfig:
    align: str = "none"
    max_dt: float = DEFAULT_MAX_DT
    rotational: bool = False
    windows: list = field(default_factory=list)

    def __post_init__(self):
        if self.align not in ("none", "umeyama"):
            raise ConfigError(f"evaluation.align must be 'none' or 'umeyama', got {self.align!r}")
        if not self.max_dt > 0:
            raise ConfigError("evaluation.max_dt must be positive")


@dataclass(frozen=True)
class OutputConfig:
    prior_map: str = "prior_map.pcd"
    ground_truth: str = "ground_truth.tum"
    odometry: str = "odometry.tum"
    report: str = "report.json"
    timing: str = "timing.json"


def _sensor(value, default):
    if value is None:
        return sensor_preset(default)
    if isinstance(value, str):
        return sensor_preset(value)
    if isinstance(value, dict):
        d = dict(value)
        if "preset" in d:
            return sensor_preset(d.pop("preset"), **d)
        return SensorSpec.from_dict(d)
    raise ConfigError("sensor entries must be a preset name or an object")


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs besides its input files."""

    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    spinning: SensorSpec = field(default_factory=lambda: sensor_preset("os0_128"))
    solid_state: SensorSpec = field(default_factory=lambda: sensor_preset("avia"))
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        allowed = {"seed", "pipeline", "sensors", "simulation", "evaluation", "outputs"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        sensors = d.get("sensors", {})
        if not isinstance(sensors, dict) or set(sensors) - {"spinning", "solid_state"}:
            raise ConfigError("sensors may only contain 'spinning' and 'solid_state'")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        try:
            spinning = _sensor(sensors.get("spinning"), "os0_128")
            solid = _sensor(sensors.get("solid_state"), "avia")
        except TypeError as exc:
            raise ConfigError(f"sensors: {exc}") from None
        if spinning.kind != "spinning" or solid.kind != "solid_state":
            raise ConfigError("sensors.spinning must be a spinning lidar and sensors.solid_state a solid-state one")
        return cls(
            seed=seed,
            pipeline=PipelineConfig.from_dict(d.get("pipeline", {})),
            spinning=spinning,
            solid_state=solid,
            simulation=_strict(SimulationConfig, d.get("simulation", {}), "simulation"),
            evaluation=_strict(EvalConfig, d.get("evaluation", {}), "evaluation"),
            outputs=_strict(OutputConfig, d.get("outputs", {}), "outputs"),
        )

    def to_dict(self):
        return {
            "seed": self.seed,
            "pipeline": self.pipeline.to_dict(),
            "sensors": {"spinning": self.spinning.to_dict(), "solid_state": self.solid_state.to_dict()},
            "simulation": dataclasses.asdict(self.simulation),
            "evaluation": dataclasses.asdict(self.evaluation),
            "outputs": dataclasses.asdict(self.outputs),
        }


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: RunConfig):
    sim = cfg.simulation
    scene_name = args.preset or sim.scene
    scene = build_scene(scene_name)
    if sim.legs is not None:
        script = stop_and_go_script([tuple(leg) for leg in sim.legs], sim.stop_duration, sim.speed, sim.start_stop)
    else:
        script = default_script(scene_name)
    extr = pose_from_dict(sim.solid_extrinsic) if sim.solid_extrinsic else DEFAULT_SOLID_EXTRINSIC
    out = args.out or "."
    export_dataset(
        scene,
        script,
        cfg.spinning,
        cfg.solid_state,
        seed=cfg.seed,
        out_dir=out,
        solid_extrinsic=extr,
        imu_rate=sim.imu_rate,
        noise_accel=sim.noise_accel,
        noise_gyro=sim.noise_gyro,
    )
    log.info("dataset written to %s", out)
    return 0


def _dataset_dir(args):
    if not args.inp:
        raise ConfigError("--in is required")
    return args.inp


def cmd_odometry(args, cfg: RunConfig):
    ds = load_dataset(_dataset_dir(args))
    traj = run_odometry(ds.spinning, cfg.pipeline)
    out = args.out or os.path.join(args.inp, cfg.outputs.odometry)
    if os.path.isdir(out):
        out = os.path.join(out, cfg.outputs.odometry)
    write_tum(out, traj)
    return 0


def cmd_build_map(args, cfg: RunConfig):
    d = _dataset_dir(args)
    out = args.out or d
    os.makedirs(out, exist_ok=True)
    ds = load_dataset(d)
    pcfg = resolve_config(cfg.pipeline, ds.manifest)
    t0 = time.perf_counter()
    odom, source = ds.odometry, "external"
    if odom is None:
        odom, source = run_odometry(ds.spinning, pcfg), "internal"
        write_tum(os.path.join(out, cfg.outputs.odometry), odom)
    t1 = time.perf_counter()
    mb = build_map(ds.solid, ds.imu, odom, pcfg)
    t2 = time.perf_counter()
    write_pcd(os.path.join(out, cfg.outputs.prior_map), mb.prior_map.cloud)
    report = base_report(pcfg)
    report["run_config"] = cfg.to_dict()
    report["odometry"] = {"source": source, "poses": len(odom), "degraded": int(odom.degraded.sum())}
    report.update(mb.report)
    write_json(os.path.join(out, cfg.outputs.report), report)
    write_json(os.path.join(out, cfg.outputs.timing), {"odometry": t1 - t0, "prior_map": t2 - t1})
    return 0


def cmd_localize(args, cfg: RunConfig):
    d = _dataset_dir(args)
    out = args.out or d
    os.makedirs(out, exist_ok=True)
    ds = load_dataset(d)
    pcfg = resolve_config(cfg.pipeline, ds.manifest)
    map_path = args.map or os.path.join(out, cfg.outputs.prior_map)
    if not os.path.exists(map_path):
        raise MissingInputError(f"prior map not found: {map_path} (run build-map first)")
    odom = ds.odometry
    odom_path = os.path.join(out, cfg.outputs.odometry)
    if odom is None and os.path.exists(odom_path):
        odom = read_tum(odom_path)
    t0 = time.perf_counter()
    grid, gt = localize(read_pcd(map_path), ds.spinning, pcfg, odom)
    elapsed = time.perf_counter() - t0
    write_tum(os.path.join(out, cfg.outputs.ground_truth), gt)
    report_path = os.path.join(out, cfg.outputs.report)
    report = _read_json(report_path) if os.path.exists(report_path) else base_report(pcfg)
    report["localization"] = {"poses": len(gt), "degraded": int(gt.degraded.sum()), "ndt_cells": len(grid)}
    write_json(report_path, report)
    timing_path = os.path.join(out, cfg.outputs.timing)
    timing = _read_json(timing_path) if os.path.exists(timing_path) else {}
    timing["localization"] = elapsed
    write_json(timing_path, timing)
    return 0


def cmd_eval(args, cfg: RunConfig):
    ev = cfg.evaluation
    est_path = args.est
    if est_path is None:
        if not args.inp:
            raise ConfigError("eval needs --est or --in")
        est_path = os.path.join(args.inp, cfg.outputs.ground_truth)
    if args.ref is None:
        raise ConfigError("eval needs --ref")
    align = args.align or ev.align
    max_dt = args.max_dt if args.max_dt is not None else ev.max_dt
    est, ref = read_tum(est_path), read_tum(args.ref)
    stats = compute_ape(est, ref, align=align, max_dt=max_dt, rotational=ev.rotational)
    out = args.out or os.path.dirname(os.path.abspath(est_path))
    os.makedirs(out, exist_ok=True)
    stats.write_json(os.path.join(out, "ape.json"))
    stats.write_csv(os.path.join(out, "ape.csv"))
    windows = [tuple(w) for w in (args.window or ev.windows)]
    evaluation = {"align": align, "max_dt": max_dt, "ape": stats.to_dict()}
    if windows:
        evaluation["stationary"] = [
            {"window": [float(a), float(b)], **stationary_deviation(est, (a, b))._asdict()} for a, b in windows
        ]
    report_path = os.path.join(out, cfg.outputs.report)
    report = _read_json(report_path) if os.path.exists(report_path) else base_report(cfg.pipeline)
    report["evaluation"] = evaluation
    write_json(report_path, report)
    print(json.dumps({"mean": stats.mean, "std": stats.std, "rmse": stats.rmse, "pairs": len(stats.per_pose_errors)}))
    return 0


def cmd_monitor(args, cfg: RunConfig):
    command = list(args.command)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        raise ConfigError("monitor needs a command after --")
    trace = monitor_process(command, args.period)
    pose_count = None
    if args.poses:
        pose_count = len(read_tum(args.poses))
    summary = summarize(trace, pose_count, args.data_duration)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    trace.write_csv(os.path.join(out, "resource_trace.csv"))
    summary.write_json(os.path.join(out, "resource_summary.json"))
    if trace.returncode:
        log.warning("monitored command exited with status %s", trace.returncode)
    print(json.dumps(summary.to_dict()))
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", help="output directory or file")

    p = argparse.ArgumentParser(prog="gtforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gtforge {__version__}")
    sub = p.add_subparsers(dest="command_name", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    s.add_argument("--preset", help="scene preset (room_10x8x3, corridor_40m, open_road, forest)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("odometry", parents=[common], help="scan-to-map odometry on the spinning scans")
    s.add_argument("--in", dest="inp", help="dataset directory")
    s.set_defaults(func=cmd_odometry)

    s = sub.add_parser("build-map", parents=[common], help="build the denoised prior map")
    s.add_argument("--in", dest="inp", help="dataset directory")
    s.set_defaults(func=cmd_build_map)

    s = sub.add_parser("localize", parents=[common], help="NDT ground-truth trajectory against the prior map")
    s.add_argument("--in", dest="inp", help="dataset directory")
    s.add_argument("--map", help="prior map PCD (default: <out>/prior_map.pcd)")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("eval", parents=[common], help="absolute position error of a trajectory")
    s.add_argument("--in", dest="inp", help="directory holding ground_truth.tum when --est is omitted")
    s.add_argument("--est", help="estimated trajectory (TUM)")
    s.add_argument("--ref", help="reference trajectory (TUM)")
    s.add_argument("--align", choices=("none", "umeyama"))
    s.add_argument("--max-dt", dest="max_dt", type=float)
    s.add_argument("--window", nargs=2, type=float, action="append", metavar=("T0", "T1"), help="stationary window")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("monitor", parents=[common], help="sample CPU and RSS of a command")
    s.add_argument("--period", type=float, default=DEFAULT_SAMPLE_PERIOD, help="sample period in seconds")
    s.add_argument("--poses", help="TUM file whose pose count gives the pose rate")
    s.add_argument("--data-duration", dest="data_duration", type=float, help="recorded data length in seconds")
    s.add_argument("command", nargs=argparse.REMAINDER)
    s.set_defaults(func=cmd_monitor)
    return p


def _setup_logging():
    level = os.environ.get("GTFORGE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        return args.func(args, cfg)
    except GtForgeError as exc:
        print(f"gtforge: error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_status


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
