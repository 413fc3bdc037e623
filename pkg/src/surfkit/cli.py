"""Command-line surface: ``surfkit augment | simulate | slam | eval | losses``.

Every command takes a JSON config (``--config``), an output directory
(``--out``) and an optional ``--seed`` overriding the config seed, and writes
the fully resolved configuration it ran with to ``<out>/config.json`` so any
output directory documents an identical re-run. Exit codes: 0 on success, 2
for input/config problems, 3 when an algorithm fails on valid inputs.

Heavy imports happen inside the command handlers: ``SURFKIT_THREADS`` must be
exported to the BLAS/OpenMP environment before numpy first loads for the cap
to take effect.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ALGORITHM = 3

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _thread_cap() -> int | None:
    raw = os.environ.get("SURFKIT_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap < 1:
        raise ValueError(f"SURFKIT_THREADS must be a positive integer, got {raw!r}")
    return cap


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------


def _merge_config(defaults: dict, override: dict, context: str) -> dict:
    """Defaults overlaid with override, rejecting unknown keys recursively.

    A section whose default is the empty dict is an open schema (validated by
    its consumer) and is taken wholesale.
    """
    if not isinstance(override, dict):
        raise ValueError(f"{context}: expected an object, got {type(override).__name__}")
    if not defaults:
        return copy.deepcopy(override)
    unknown = sorted(set(override) - set(defaults))
    if unknown:
        raise ValueError(f"{context}: unknown keys {unknown}")
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge_config(out[key], value, f"{context}.{key}")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _load_run_config(args, defaults: dict, command: str) -> dict:
    from . import fileio

    raw = fileio.read_json(args.config)
    if not isinstance(raw, dict):
        raise ValueError(f"{command} config: top level must be a JSON object")
    cfg = _merge_config(defaults, raw, f"{command} config")
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def _resolve_path(base: Path, value) -> str:
    path = Path(value)
    if not path.is_absolute():
        path = (base / path).resolve()
    return str(path)


def _write_resolved_config(out_dir: Path, command: str, cfg: dict) -> None:
    from . import fileio

    fileio.write_json(out_dir / "config.json", {"command": command, **cfg})


def _pose_dict_default() -> dict:
    return {"quat_wxyz": [1.0, 0.0, 0.0, 0.0], "position": [0.0, 0.0, 0.0]}


def _calib_from_dict(d: dict):
    from .camera import StereoCalib

    required = ("fx", "fy", "cx", "cy", "baseline")
    missing = [k for k in required if k not in d]
    if missing:
        raise ValueError(f"calibration: missing keys {missing}")
    return StereoCalib(**{k: float(d[k]) for k in required})


def _load_calib(path_or_none, search_dir: Path):
    """Load stereo calibration from an explicit JSON path or a directory.

    A directory is searched for ``calib.json`` first, then for a ``calib``
    section inside its resolved ``config.json``.
    """
    from . import fileio

    if path_or_none is not None:
        d = fileio.read_json(path_or_none)
        return _calib_from_dict(d.get("calib", d))
    calib_path = search_dir / "calib.json"
    if calib_path.exists():
        return _calib_from_dict(fileio.read_json(calib_path))
    config_path = search_dir / "config.json"
    if config_path.exists():
        d = fileio.read_json(config_path)
        if "calib" in d:
            return _calib_from_dict(d["calib"])
    raise FileNotFoundError(f"no calibration found in {search_dir} (calib.json or config.json)")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_DEFAULT_SCENE = [
    {"kind": "plane", "point": [0.0, 0.0, 8.0], "normal": [0.0, 0.0, 1.0], "texture_id": 0},
    {"kind": "sphere", "center": [4.5, 2.5, 7.4], "radius": 0.8, "texture_id": 1},
    {"kind": "box", "center": [2.0, 1.0, 7.6], "half_extents": [0.5, 0.6, 0.4], "texture_id": 2},
    {"kind": "sphere", "center": [7.0, 4.0, 7.5], "radius": 0.5, "texture_id": 3},
]

_DEFAULT_WAYPOINTS = [
    [0.0, 0.0, 5.0],
    [9.0, 0.0, 5.2],
    [9.0, 5.0, 5.4],
    [0.0, 5.0, 5.2],
    [0.0, 0.0, 5.0],
]


def _simulate_defaults() -> dict:
    from .sensorsim import BARO_RATE_HZ, DVL_RATE_HZ, IMU_RATE_HZ, NoiseConfig

    return {
        "seed": 0,
        "duration_s": 60.0,
        "waypoints": copy.deepcopy(_DEFAULT_WAYPOINTS),
        "yaws": None,
        "keyframe_hz": 1.0,
        "imu_rate_hz": IMU_RATE_HZ,
        "dvl_rate_hz": DVL_RATE_HZ,
        "baro_rate_hz": BARO_RATE_HZ,
        "noise": NoiseConfig().to_dict(),
        "calib": {"fx": 96.0, "fy": 96.0, "cx": 63.5, "cy": 47.5, "baseline": 0.12},
        "image_shape": [96, 128],
        "render_images": True,
        "scene": copy.deepcopy(_DEFAULT_SCENE),
        "cam_extrinsics": _pose_dict_default(),
        "dvl_extrinsics": _pose_dict_default(),
        "registrations": {
            "count": 20,
            "rot_sigma": 0.005,
            "trans_sigma": 0.01,
            "outlier_rate": 0.2,
            "min_age": 20.0,
        },
    }


def _primitive_from_dict(d: dict, index: int):
    import numpy as np

    from .sensorsim import ScenePrimitive

    allowed = {
        "kind", "point", "normal", "center", "radius", "half_extents",
        "origin_xy", "cell_xy", "heights", "texture_id",
    }
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValueError(f"scene[{index}]: unknown keys {unknown}")
    kwargs = dict(d)
    for key in ("point", "normal", "center", "half_extents", "origin_xy", "cell_xy"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(float(v) for v in kwargs[key])
    if kwargs.get("heights") is not None:
        kwargs["heights"] = np.asarray(kwargs["heights"], dtype=float)
    return ScenePrimitive(**kwargs)


def cmd_simulate(args) -> int:
    import numpy as np

    from . import fileio, pipeline
    from .factors import KeyframeState
    from .sensorsim import (
        NoiseConfig,
        Trajectory,
        TrajectorySpec,
        render_stereo_pair,
        synthesize_baro,
        synthesize_dvl,
        synthesize_imu,
        synthesize_registrations,
    )

    cfg = _load_run_config(args, _simulate_defaults(), "simulate")
    cfg["noise"]["seed"] = cfg["seed"]
    if cfg["duration_s"] < 0:
        raise ValueError("simulate config: duration_s must be >= 0")
    if cfg["keyframe_hz"] <= 0:
        raise ValueError("simulate config: keyframe_hz must be positive")
    calib = _calib_from_dict(cfg["calib"])
    shape = tuple(int(v) for v in cfg["image_shape"])
    if len(shape) != 2 or min(shape) < 2:
        raise ValueError("simulate config: image_shape must be [height, width]")
    cam_extr = pipeline.pose_from_dict(cfg["cam_extrinsics"])
    dvl_extr = pipeline.pose_from_dict(cfg["dvl_extrinsics"])
    noise = NoiseConfig.from_dict(cfg["noise"])
    scene = [_primitive_from_dict(p, i) for i, p in enumerate(cfg["scene"])]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, "simulate", cfg)
    fileio.write_json(out / "calib.json", cfg["calib"])

    if cfg["duration_s"] == 0:
        for name in ("imu.jsonl", "dvl.jsonl", "baro.jsonl"):
            fileio.write_sensor_log(out / name, [])
        fileio.write_tum(out / "groundtruth.tum", np.zeros(0), [])
        fileio.write_json(out / "keyframes.json", {"times": [], "frames": []})
        fileio.write_json(out / "registrations.json", {"candidates": []})
        print(f"simulate: duration 0, wrote header-only logs to {out}")
        return EXIT_OK

    traj = Trajectory(
        TrajectorySpec(
            waypoints=np.asarray(cfg["waypoints"], dtype=float),
            duration=float(cfg["duration_s"]),
            yaws=None if cfg["yaws"] is None else np.asarray(cfg["yaws"], dtype=float),
        )
    )
    imu = synthesize_imu(traj, noise, rate_hz=float(cfg["imu_rate_hz"]))
    dvl = synthesize_dvl(traj, noise, extrinsics=dvl_extr, rate_hz=float(cfg["dvl_rate_hz"]))
    baro = synthesize_baro(traj, noise, rate_hz=float(cfg["baro_rate_hz"]))
    fileio.write_sensor_log(out / "imu.jsonl", (pipeline.imu_record(m) for m in imu))
    fileio.write_sensor_log(out / "dvl.jsonl", (pipeline.dvl_record(m) for m in dvl))
    fileio.write_sensor_log(out / "baro.jsonl", (pipeline.baro_record(m) for m in baro))

    n_kf = int(np.floor(cfg["duration_s"] * cfg["keyframe_hz"])) + 1
    kf_times = np.arange(n_kf) / cfg["keyframe_hz"]
    fileio.write_tum(out / "groundtruth.tum", kf_times, [traj.pose(t) for t in kf_times])
    t0 = float(kf_times[0])
    initial = KeyframeState(
        rotation=traj.rotation(t0),
        position=np.asarray(traj.position(t0), dtype=float),
        velocity=traj.body_velocity(t0),
        gyro_bias=np.zeros(3),
        accel_bias=np.zeros(3),
        dvl_bias=np.zeros(3),
        timestamp=t0,
    )
    fileio.write_json(out / "initial_state.json", pipeline.state_to_dict(initial))

    frames = []
    for i, t in enumerate(kf_times):
        left, right, depth_l, depth_r, disparity = render_stereo_pair(
            scene, traj.pose(float(t)) @ cam_extr, calib, shape
        )
        prefix = f"kf_{i:06d}"
        frame = {
            "id": i,
            "t": float(t),
            "depth_left": f"{prefix}_depth_left.pfm",
            "depth_right": f"{prefix}_depth_right.pfm",
            "disparity": f"{prefix}_disparity.pfm",
            "left": f"{prefix}_left.png" if cfg["render_images"] else None,
            "right": f"{prefix}_right.png" if cfg["render_images"] else None,
        }
        fileio.write_pfm(out / frame["depth_left"], depth_l)
        fileio.write_pfm(out / frame["depth_right"], depth_r)
        fileio.write_pfm(out / frame["disparity"], disparity)
        if cfg["render_images"]:
            fileio.write_png8(out / frame["left"], left)
            fileio.write_png8(out / frame["right"], right)
        frames.append(frame)
    fileio.write_json(
        out / "keyframes.json", {"times": [float(t) for t in kf_times], "frames": frames}
    )

    reg_cfg = cfg["registrations"]
    candidates = synthesize_registrations(
        traj,
        kf_times,
        cam_extr,
        int(reg_cfg["count"]),
        noise,
        rot_sigma=float(reg_cfg["rot_sigma"]),
        trans_sigma=float(reg_cfg["trans_sigma"]),
        outlier_rate=float(reg_cfg["outlier_rate"]),
        min_age=float(reg_cfg["min_age"]),
    )
    fileio.write_json(
        out / "registrations.json",
        {"candidates": [pipeline.candidate_to_dict(c) for c in candidates]},
    )
    print(
        f"simulate: {len(kf_times)} keyframes over {cfg['duration_s']:g} s, "
        f"{len(imu)} imu / {len(dvl)} dvl / {len(baro)} baro samples, "
        f"{len(candidates)} registration candidates -> {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# slam
# ---------------------------------------------------------------------------


def _slam_defaults() -> dict:
    from .mapping import CleaningConfig
    from .pipeline import ReplayConfig

    return {
        "seed": 0,
        "data_dir": None,
        "imu": None,
        "dvl": None,
        "baro": None,
        "keyframes": None,
        "registrations": None,
        "initial_state": None,
        "calib": None,
        "sigmas_from_data": True,
        "replay": ReplayConfig().to_dict(),
        "map": {
            "enabled": True,
            "stride": 2,
            "colorize": True,
            "cleaning": CleaningConfig().to_dict(),
        },
    }


def cmd_slam(args) -> int:
    import time

    import numpy as np

    from . import fileio, mapping, pipeline
    from .camera import CameraIntrinsics
    from .mapping import CleaningConfig

    cfg_path = Path(args.config)
    raw_replay_keys = set()
    raw = fileio.read_json(cfg_path)
    if isinstance(raw, dict) and isinstance(raw.get("replay"), dict):
        raw_replay_keys = set(raw["replay"])
    cfg = _load_run_config(args, _slam_defaults(), "slam")
    if cfg["data_dir"] is None:
        raise ValueError("slam config: data_dir is required")
    base = cfg_path.resolve().parent
    data_dir = Path(_resolve_path(base, cfg["data_dir"]))
    cfg["data_dir"] = str(data_dir)

    def input_path(key: str, default_name: str) -> Path:
        if cfg[key] is not None:
            cfg[key] = _resolve_path(base, cfg[key])
            return Path(cfg[key])
        return data_dir / default_name

    imu_path = input_path("imu", "imu.jsonl")
    dvl_path = input_path("dvl", "dvl.jsonl")
    baro_path = input_path("baro", "baro.jsonl")
    kf_path = input_path("keyframes", "keyframes.json")
    reg_path = input_path("registrations", "registrations.json")
    init_path = input_path("initial_state", "initial_state.json")

    # sensor sigmas default to the noise model recorded with the data
    data_config = {}
    data_config_path = data_dir / "config.json"
    if data_config_path.exists():
        data_config = fileio.read_json(data_config_path)
    if cfg["sigmas_from_data"] and "noise" in data_config:
        noise = data_config["noise"]
        for key, src in (
            ("gyro_sigma", "gyro_sigma"),
            ("accel_sigma", "accel_sigma"),
            ("dvl_sigma", "dvl_sigma"),
            ("baro_sigma", "baro_sigma"),
        ):
            if key not in raw_replay_keys:
                cfg["replay"][key] = float(noise[src])
        regs = data_config.get("registrations", {})
        for key, src in (("reg_rot_sigma", "rot_sigma"), ("reg_trans_sigma", "trans_sigma")):
            if key not in raw_replay_keys and src in regs:
                cfg["replay"][key] = float(regs[src])
    if args.real_time:
        cfg["replay"]["real_time"] = True
    if args.no_registration:
        cfg["replay"]["use_registration"] = False
    replay_cfg = pipeline.ReplayConfig.from_dict(cfg["replay"])

    cam_extr = pipeline.pose_from_dict(data_config.get("cam_extrinsics", _pose_dict_default()))
    dvl_extr = pipeline.pose_from_dict(data_config.get("dvl_extrinsics", _pose_dict_default()))

    kf_doc = fileio.read_json(kf_path)
    kf_times = np.asarray(kf_doc.get("times", []), dtype=float)
    frames = kf_doc.get("frames", [])
    if kf_times.size == 0:
        raise ValueError(f"slam: no keyframes listed in {kf_path}")
    initial = pipeline.state_from_dict(fileio.read_json(init_path))
    imu = pipeline.parse_imu_records(fileio.read_sensor_log(imu_path))
    dvl = pipeline.parse_dvl_records(fileio.read_sensor_log(dvl_path)) if dvl_path.exists() else []
    baro = pipeline.parse_baro_records(fileio.read_sensor_log(baro_path)) if baro_path.exists() else []
    candidates = []
    if reg_path.exists():
        candidates = [
            pipeline.candidate_from_dict(d)
            for d in fileio.read_json(reg_path).get("candidates", [])
        ]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, "slam", cfg)

    result = pipeline.replay(
        kf_times,
        initial,
        imu,
        dvl=dvl,
        baro=baro,
        candidates=candidates,
        config=replay_cfg,
        cam_extrinsics=cam_extr,
        dvl_extrinsics=dvl_extr,
    )
    times, poses = result.trajectory()
    fileio.write_tum(out / "trajectory.tum", times, poses)
    report = pipeline.build_report(result, replay_cfg)
    report["outputs"] = {"trajectory": "trajectory.tum", "map": None, "report": "report.json"}

    map_cfg = cfg["map"]
    if map_cfg["enabled"]:
        by_id = {int(f["id"]): f for f in frames}
        missing = [k for k in result.keyframe_ids if k not in by_id or not by_id[k].get("depth_left")]
        if missing:
            raise ValueError(
                f"slam: mapping enabled but keyframe {missing[0]} has no depth raster "
                f"(set map.enabled false for logs without depth)"
            )
        calib = _load_calib(cfg["calib"], data_dir)
        stride = int(map_cfg["stride"])
        if stride < 1:
            raise ValueError("slam config: map.stride must be >= 1")
        intr = calib.left
        intr_dec = CameraIntrinsics(intr.fx / stride, intr.fy / stride, intr.cx / stride, intr.cy / stride)
        cleaning = CleaningConfig.from_dict(map_cfg["cleaning"])
        t0 = time.perf_counter()
        keyframes = []
        states = result.graph.states
        for orig in result.keyframe_ids:
            frame = by_id[orig]
            depth = fileio.read_pfm(data_dir / frame["depth_left"])[::stride, ::stride]
            color = None
            if map_cfg["colorize"] and frame.get("left"):
                color = fileio.read_png8(data_dir / frame["left"])[::stride, ::stride]
            pose_cam = states[result.index_of[orig]].pose() @ cam_extr
            keyframes.append((depth, color, pose_cam))
        cloud = mapping.fuse(keyframes, intr_dec, cleaning)
        fileio.write_ply(out / "map.ply", cloud.positions.astype(np.float32), cloud.colors)
        report["outputs"]["map"] = "map.ply"
        report["map"] = {
            "points": len(cloud),
            "keyframes": len(keyframes),
            "stride": stride,
            "fuse_wall_s": time.perf_counter() - t0,
        }
    fileio.write_json(out / "report.json", report)

    kf = report["keyframes"]
    reg = report["registration"]
    print(
        f"slam: processed {kf['processed']}/{kf['offered']} keyframes "
        f"({kf['drop_pct']:.1f}% dropped), registrations accepted {reg['accepted']} / "
        f"gated {reg['gated_out']} / dropped {reg['dropped']} / skipped {reg['skipped']} -> {out}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _eval_defaults() -> dict:
    from . import evalkit

    return {
        "seed": 0,
        "trajectory": {
            "estimate": None,
            "reference": None,
            "max_dt": evalkit.DEFAULT_MAX_DT,
            "align": ["none", "se3", "sim3"],
        },
        "disparity": {
            "estimate": None,
            "reference": None,
            "fg_mask": None,
            "bp_thresholds": list(evalkit.DEFAULT_BP_THRESHOLDS),
        },
        "map": {
            "estimate": None,
            "reference": None,
            "voxel": evalkit.DEFAULT_VOXEL,
            "hit_distance": evalkit.DEFAULT_HIT_DISTANCE,
        },
    }


def _section_active(section: dict, name: str) -> bool:
    has_est = section["estimate"] is not None
    has_ref = section["reference"] is not None
    if has_est != has_ref:
        raise ValueError(f"eval config: {name} needs both estimate and reference")
    return has_est


def cmd_eval(args) -> int:
    import numpy as np

    from . import evalkit, fileio
    from .mapping import PointCloud

    cfg = _load_run_config(args, _eval_defaults(), "eval")
    base = Path(args.config).resolve().parent
    report: dict = {}
    lines: list[str] = []

    active = {name: _section_active(cfg[name], name) for name in ("trajectory", "disparity", "map")}
    if not any(active.values()):
        raise ValueError(
            "eval config: nothing to do — provide estimate/reference in at least one of "
            "trajectory, disparity, map"
        )
    for name in ("trajectory", "disparity", "map"):
        if active[name]:
            for key in ("estimate", "reference"):
                cfg[name][key] = _resolve_path(base, cfg[name][key])
    if active["disparity"] and cfg["disparity"]["fg_mask"] is not None:
        cfg["disparity"]["fg_mask"] = _resolve_path(base, cfg["disparity"]["fg_mask"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, "eval", cfg)

    if active["trajectory"]:
        sec = cfg["trajectory"]
        est_t, est_p = fileio.read_tum(sec["estimate"])
        ref_t, ref_p = fileio.read_tum(sec["reference"])
        est = evalkit.PoseTrajectory(est_t, est_p)
        ref = evalkit.PoseTrajectory(ref_t, ref_p)
        pairs = evalkit.associate(est, ref, max_dt=float(sec["max_dt"]))
        ape = {
            align: evalkit.ape_rmse(est, ref, align=align, max_dt=float(sec["max_dt"]))
            for align in sec["align"]
        }
        report["trajectory"] = {"pairs": len(pairs), "ape_rmse_m": ape}
        lines.append(f"trajectory: {len(pairs)} associated pairs")
        for align, value in ape.items():
            lines.append(f"  ape_rmse[{align:>4s}] = {value:.6f} m")

    if active["disparity"]:
        sec = cfg["disparity"]
        pred = fileio.read_pfm(sec["estimate"])
        gt = fileio.read_pfm(sec["reference"])
        if sec["fg_mask"] is not None:
            fg = fileio.read_png8(sec["fg_mask"])
            if fg.ndim == 3:
                fg = fg.mean(axis=2)
            fg = fg > 0.5
            regions = list(evalkit.REGIONS)
        else:
            fg = np.isfinite(gt)
            regions = ["combined", "on_geometry"]
        thresholds = tuple(float(v) for v in sec["bp_thresholds"])
        report["disparity"] = {}
        for region in regions:
            metrics = evalkit.disparity_metrics(pred, gt, fg, region=region, bp_thresholds=thresholds)
            report["disparity"][region] = metrics.to_dict()
            bp = " ".join(f"bp{k:g}={v:.3f}%" for k, v in metrics.bp.items())
            lines.append(
                f"disparity[{region}]: epe={metrics.epe:.4f}px {bp} "
                f"d1={metrics.d1:.3f}% n={metrics.pixel_count}"
            )

    if active["map"]:
        sec = cfg["map"]
        est_pts, est_cols = fileio.read_ply(sec["estimate"])
        ref_pts, ref_cols = fileio.read_ply(sec["reference"])
        metrics = evalkit.map_metrics(
            PointCloud(est_pts, est_cols),
            PointCloud(ref_pts, ref_cols),
            voxel=float(sec["voxel"]),
            hit_distance=float(sec["hit_distance"]),
        )
        report["map"] = metrics.to_dict()
        lines.append(
            f"map: accuracy={metrics.accuracy:.4f}m completion={metrics.completion:.4f}m "
            f"precision={metrics.precision:.4f} recall={metrics.recall:.4f}"
        )

    fileio.write_json(out / "report.json", report)
    text = "\n".join(lines) + "\n"
    with fileio.atomic_write(out / "report.txt", "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _losses_defaults() -> dict:
    from .losses import LossWeights

    return {
        "seed": 0,
        "left": None,
        "right": None,
        "disparity": None,
        "calib": None,
        "gt_disparity": None,
        "depth_left": None,
        "depth_right": None,
        "water": None,
        "weights": dataclasses.asdict(LossWeights()),
    }


def cmd_losses(args) -> int:
    from . import fileio, losses
    from .optics import WaterParams

    cfg = _load_run_config(args, _losses_defaults(), "losses")
    base = Path(args.config).resolve().parent
    for key in ("left", "right", "disparity"):
        if cfg[key] is None:
            raise ValueError(f"losses config: {key} is required")
        cfg[key] = _resolve_path(base, cfg[key])
    for key in ("calib", "gt_disparity", "depth_left", "depth_right"):
        if cfg[key] is not None:
            cfg[key] = _resolve_path(base, cfg[key])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, "losses", cfg)

    weights = losses.LossWeights(**cfg["weights"])
    left = fileio.read_png8(cfg["left"])
    right = fileio.read_png8(cfg["right"])
    disparity = fileio.read_pfm(cfg["disparity"])

    mask_left = mask_right = None
    if cfg["water"] is not None:
        water_cfg = cfg["water"]
        water = WaterParams(
            beta=tuple(float(v) for v in water_cfg["beta"]),
            b_inf=tuple(float(v) for v in water_cfg["b_inf"]),
        )
        if cfg["depth_left"] is not None:
            depth_l = fileio.read_pfm(cfg["depth_left"])
        elif cfg["calib"] is not None:
            calib = _load_calib(cfg["calib"], base)
            depth_l = losses.disparity_to_depth(disparity, calib)
        else:
            raise ValueError("losses config: water masking needs depth_left or calib")
        mask_left = losses.visibility_mask(water, depth_l, weights.t_min)
        if cfg["depth_right"] is not None:
            depth_r = fileio.read_pfm(cfg["depth_right"])
            mask_right = losses.visibility_mask(water, depth_r, weights.t_min)

    total, terms = losses.total_self_loss(
        left, right, disparity, weights, mask_left, mask_right
    )
    supervised = None
    if cfg["gt_disparity"] is not None:
        gt = fileio.read_pfm(cfg["gt_disparity"])
        supervised = losses.supervised_loss([disparity], gt, weights)

    report = {
        "total_self": total,
        "terms": terms,
        "supervised": supervised,
        "weights": dataclasses.asdict(weights),
        "masked": {"left": mask_left is not None, "right": mask_right is not None},
    }
    fileio.write_json(out / "losses.json", report)
    sup = "n/a" if supervised is None else f"{supervised:.6f}"
    print(
        f"losses: total_self={total:.6f} (warp={terms['warp']:.6f} occam={terms['occam']:.6f} "
        f"smooth={terms['smooth']:.6f}) supervised={sup}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------


def _augment_defaults() -> dict:
    return {
        "seed": 0,
        "input_dir": None,
        "calib": None,
        "ranges": {},
        "t_min": 0.05,
        "workers": None,
    }


def _ranges_from_dict(d: dict):
    from .optics import AugmentationConfig

    defaults = AugmentationConfig()
    fields = {f.name for f in dataclasses.fields(AugmentationConfig)}
    unknown = sorted(set(d) - fields)
    if unknown:
        raise ValueError(f"augment config: unknown range keys {unknown}")
    kwargs = {}
    for key, value in d.items():
        if key == "jerlov_table":
            kwargs[key] = {k: tuple(float(x) for x in v) for k, v in value.items()}
        elif key == "b_inf_range":
            kwargs[key] = tuple(tuple(float(x) for x in pair) for pair in value)
        elif isinstance(getattr(defaults, key), tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return AugmentationConfig(**kwargs)


def cmd_augment(args) -> int:
    from . import fileio, optics

    cfg = _load_run_config(args, _augment_defaults(), "augment")
    if cfg["input_dir"] is None:
        raise ValueError("augment config: input_dir is required")
    base = Path(args.config).resolve().parent
    input_dir = Path(_resolve_path(base, cfg["input_dir"]))
    cfg["input_dir"] = str(input_dir)
    if cfg["calib"] is not None:
        cfg["calib"] = _resolve_path(base, cfg["calib"])
    if not input_dir.is_dir():
        raise FileNotFoundError(f"augment: input_dir {input_dir} is not a directory")
    ranges = _ranges_from_dict(cfg["ranges"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, "augment", cfg)

    lefts = sorted(input_dir.glob("*_left.png"))
    if not lefts:
        print(f"warning: augment: no *_left.png frames found in {input_dir}", file=sys.stderr)
        return EXIT_OK
    calib = _load_calib(cfg["calib"], input_dir)

    frames = []
    for left_path in lefts:
        prefix = left_path.name[: -len("_left.png")]
        needed = {
            "right": input_dir / f"{prefix}_right.png",
            "depth_left": input_dir / f"{prefix}_depth_left.pfm",
            "depth_right": input_dir / f"{prefix}_depth_right.pfm",
        }
        missing = [str(p) for p in needed.values() if not p.exists()]
        if missing:
            raise FileNotFoundError(f"augment: frame {prefix!r} is missing {missing}")
        frames.append((prefix, left_path, needed))

    def process(item) -> str:
        index, (prefix, left_path, needed) = item
        sample = optics.sample_augmentation(ranges, cfg["seed"] + index)
        pair = optics.augment_pair(
            fileio.read_png8(left_path),
            fileio.read_png8(needed["right"]),
            fileio.read_pfm(needed["depth_left"]),
            fileio.read_pfm(needed["depth_right"]),
            calib,
            sample,
            t_min=float(cfg["t_min"]),
        )
        fileio.write_png8(out / f"{prefix}_left.png", pair.left)
        fileio.write_png8(out / f"{prefix}_right.png", pair.right)
        fileio.write_png8(out / f"{prefix}_mask_left.png", pair.mask_left.astype(float))
        fileio.write_png8(out / f"{prefix}_mask_right.png", pair.mask_right.astype(float))
        fileio.write_json(out / f"{prefix}_sample.json", dataclasses.asdict(sample))
        return prefix

    workers = cfg["workers"] if cfg["workers"] is not None else (os.cpu_count() or 1)
    workers = max(1, int(workers))
    cap = _thread_cap()
    if cap is not None:
        workers = min(workers, cap)
    if workers > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(process, enumerate(frames)))
    else:
        done = [process(item) for item in enumerate(frames)]
    print(f"augment: wrote {len(done)} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfkit",
        description=(
            "Underwater stereo augmentation, loss kernels, and acoustic-inertial "
            "SLAM toolkit."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str, func):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, required=True, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.set_defaults(func=func)
        return sp

    add_command("augment", "render underwater-augmented stereo pairs", cmd_augment)
    add_command("simulate", "synthesize sensor logs and ray-cast keyframes", cmd_simulate)
    slam = add_command("slam", "replay sensor logs through the estimator", cmd_slam)
    slam.add_argument(
        "--real-time",
        action="store_true",
        help="replay against a simulated arrival clock, dropping stale keyframes",
    )
    slam.add_argument(
        "--no-registration",
        action="store_true",
        help="ignore loop-closure candidates (dead-reckoning baseline)",
    )
    add_command("eval", "score estimates against references", cmd_eval)
    add_command("losses", "evaluate the stereo objective on one pair", cmd_losses)
    return parser


def main(argv=None) -> int:
    try:
        cap = _thread_cap()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if cap is not None:
        for var in _THREAD_ENV_VARS:
            os.environ.setdefault(var, str(cap))

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALGORITHM


if __name__ == "__main__":
    sys.exit(main())
