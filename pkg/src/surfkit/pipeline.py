"""Streaming replay of sensor logs through the keyframe factor graph.

The replay walks the keyframe grid in timestamp order: IMU samples are
buffered and preintegrated between consecutive processed keyframes, DVL and
barometer samples attach to the nearest keyframe within half their sampling
period, and loop-closure candidates are gated as soon as their query keyframe
exists. With ``real_time`` enabled the replay additionally runs a simulated
arrival clock with fixed nominal per-stage service times and drops keyframes
that would be picked up stale; because the clock is simulated, the drop
decisions depend only on the configuration and inputs — never on wall time —
so primary outputs stay byte-reproducible run to run.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .factors import (
    DEFAULT_PRIOR_SIGMAS,
    FactorGraph,
    KeyframeState,
    SolverConfig,
    preintegrate,
)
from .geom import Pose, Rotation
from .sensorsim import (
    BaroMeasurement,
    DvlMeasurement,
    ImuMeasurement,
    RegistrationCandidate,
)

# ---------------------------------------------------------------------------
# JSON codecs for run artifacts
# ---------------------------------------------------------------------------


def pose_to_dict(pose: Pose) -> dict:
    return {
        "quat_wxyz": [float(v) for v in pose.rotation.q],
        "position": [float(v) for v in pose.translation],
    }


def pose_from_dict(d: dict) -> Pose:
    return Pose(
        Rotation(np.asarray(d["quat_wxyz"], dtype=float)),
        np.asarray(d["position"], dtype=float),
    )


def state_to_dict(state: KeyframeState) -> dict:
    return {
        "t": float(state.timestamp),
        "quat_wxyz": [float(v) for v in state.rotation.q],
        "position": [float(v) for v in state.position],
        "velocity_body": [float(v) for v in state.velocity],
        "gyro_bias": [float(v) for v in state.gyro_bias],
        "accel_bias": [float(v) for v in state.accel_bias],
        "dvl_bias": [float(v) for v in state.dvl_bias],
    }


def state_from_dict(d: dict) -> KeyframeState:
    return KeyframeState(
        rotation=Rotation(np.asarray(d["quat_wxyz"], dtype=float)),
        position=np.asarray(d["position"], dtype=float),
        velocity=np.asarray(d["velocity_body"], dtype=float),
        gyro_bias=np.asarray(d.get("gyro_bias", (0.0, 0.0, 0.0)), dtype=float),
        accel_bias=np.asarray(d.get("accel_bias", (0.0, 0.0, 0.0)), dtype=float),
        dvl_bias=np.asarray(d.get("dvl_bias", (0.0, 0.0, 0.0)), dtype=float),
        timestamp=float(d["t"]),
    )


def imu_record(m: ImuMeasurement) -> dict:
    return {
        "sensor": "imu",
        "t": float(m.t),
        "payload": {"gyro": [float(v) for v in m.gyro], "accel": [float(v) for v in m.accel]},
    }


def dvl_record(m: DvlMeasurement) -> dict:
    return {"sensor": "dvl", "t": float(m.t), "payload": {"velocity": [float(v) for v in m.velocity]}}


def baro_record(m: BaroMeasurement) -> dict:
    return {"sensor": "baro", "t": float(m.t), "payload": {"depth": float(m.depth)}}


def _finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what}: non-finite value in sensor log")
    return values


def parse_imu_records(records) -> list[ImuMeasurement]:
    out = []
    for rec in records:
        if rec.get("sensor") != "imu":
            raise ValueError(f"expected imu record, got sensor={rec.get('sensor')!r}")
        p = rec["payload"]
        out.append(
            ImuMeasurement(
                t=float(rec["t"]),
                gyro=_finite(np.asarray(p["gyro"], dtype=float), "imu gyro"),
                accel=_finite(np.asarray(p["accel"], dtype=float), "imu accel"),
            )
        )
    return out


def parse_dvl_records(records) -> list[DvlMeasurement]:
    out = []
    for rec in records:
        if rec.get("sensor") != "dvl":
            raise ValueError(f"expected dvl record, got sensor={rec.get('sensor')!r}")
        velocity = _finite(np.asarray(rec["payload"]["velocity"], dtype=float), "dvl velocity")
        out.append(DvlMeasurement(t=float(rec["t"]), velocity=velocity))
    return out


def parse_baro_records(records) -> list[BaroMeasurement]:
    out = []
    for rec in records:
        if rec.get("sensor") != "baro":
            raise ValueError(f"expected baro record, got sensor={rec.get('sensor')!r}")
        depth = float(rec["payload"]["depth"])
        if not np.isfinite(depth):
            raise ValueError("baro depth: non-finite value in sensor log")
        out.append(BaroMeasurement(t=float(rec["t"]), depth=depth))
    return out


def candidate_to_dict(c: RegistrationCandidate) -> dict:
    return {
        "query_id": int(c.query_id),
        "match_id": int(c.match_id),
        "transform": pose_to_dict(c.transform),
        "is_outlier": bool(c.is_outlier),
    }


def candidate_from_dict(d: dict) -> RegistrationCandidate:
    return RegistrationCandidate(
        query_id=int(d["query_id"]),
        match_id=int(d["match_id"]),
        transform=pose_from_dict(d["transform"]),
        is_outlier=bool(d.get("is_outlier", False)),
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ServiceTimes:
    """Nominal per-stage costs driving the simulated real-time clock.

    ``stale_after_s`` is the queueing latency past which an arriving keyframe
    is discarded instead of processed.
    """

    stereo_ms: float = 250.0
    optimize_ms: float = 10.0
    registration_ms: float = 100.0
    stale_after_s: float = 1.0

    def to_dict(self) -> dict:
        return {
            "stereo_ms": self.stereo_ms,
            "optimize_ms": self.optimize_ms,
            "registration_ms": self.registration_ms,
            "stale_after_s": self.stale_after_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceTimes":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass
class ReplayConfig:
    """Noise model and scheduling options for a replay.

    All modeled sigmas are floored at ``sigma_floor`` (so noiseless logs stay
    solvable) and then scaled by ``inflation`` before whitening. A uniform
    scale leaves the MAP estimate untouched while widening the marginals the
    registration gate compares against; the default absorbs the optimism of
    treating discretized, bias-corrupted sensor models as exact, which would
    otherwise push genuine loop-closure candidates past the gate.
    """

    gyro_sigma: float = 0.002
    accel_sigma: float = 0.02
    dvl_sigma: float = 0.02
    baro_sigma: float = 0.05
    reg_rot_sigma: float = 0.005
    reg_trans_sigma: float = 0.01
    inflation: float = 3.0
    sigma_floor: float = 1e-6
    bias_rw_sigmas: tuple[float, float, float] = (1e-4, 1e-3, 1e-4)
    use_registration: bool = True
    real_time: bool = False
    service: ServiceTimes = field(default_factory=ServiceTimes)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.inflation <= 0:
            raise ValueError("ReplayConfig: inflation must be positive")
        if self.sigma_floor <= 0:
            raise ValueError("ReplayConfig: sigma_floor must be positive")

    def effective(self, sigma: float) -> float:
        return max(float(sigma), self.sigma_floor) * self.inflation

    def to_dict(self) -> dict:
        return {
            "gyro_sigma": self.gyro_sigma,
            "accel_sigma": self.accel_sigma,
            "dvl_sigma": self.dvl_sigma,
            "baro_sigma": self.baro_sigma,
            "reg_rot_sigma": self.reg_rot_sigma,
            "reg_trans_sigma": self.reg_trans_sigma,
            "inflation": self.inflation,
            "sigma_floor": self.sigma_floor,
            "bias_rw_sigmas": list(self.bias_rw_sigmas),
            "use_registration": self.use_registration,
            "real_time": self.real_time,
            "service": self.service.to_dict(),
            "solver": self.solver.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReplayConfig":
        kwargs = {}
        for key in cls().to_dict():
            if key not in d:
                continue
            val = d[key]
            if key == "service":
                val = ServiceTimes.from_dict(val)
            elif key == "solver":
                val = SolverConfig.from_dict(val)
            elif key == "bias_rw_sigmas":
                val = tuple(val)
            kwargs[key] = val
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


@dataclass
class ReplayResult:
    """Estimator output plus the bookkeeping the run report is built from."""

    graph: FactorGraph
    offered: int
    keyframe_ids: list[int]
    dropped_ids: list[int]
    index_of: dict[int, int]
    registration_events: list[dict]
    preintegrate_ms: list[float]
    optimize_ms: list[float]
    registration_ms: list[float]
    solver_final: dict
    total_iterations: int
    wall_s: float

    def trajectory(self):
        """(times, body poses) of the processed keyframes in order."""
        states = self.graph.states
        return np.array([s.timestamp for s in states]), [s.pose() for s in states]


def _nearest_within(times: np.ndarray, used: np.ndarray, t: float, window: float):
    """Index of the nearest unused sample within `window` of t, else None."""
    if times.size == 0:
        return None
    j = int(np.searchsorted(times, t))
    best = None
    best_dt = window
    for cand in (j - 1, j):
        if 0 <= cand < times.size and not used[cand]:
            dt = abs(times[cand] - t)
            if dt <= best_dt:
                best_dt = dt
                best = cand
    return best


def _half_period(times: np.ndarray) -> float:
    if times.size < 2:
        return np.inf
    return 0.5 * float(np.median(np.diff(times)))


def replay(
    keyframe_times,
    initial_state: KeyframeState,
    imu,
    dvl=(),
    baro=(),
    candidates=(),
    config: ReplayConfig | None = None,
    cam_extrinsics: Pose | None = None,
    dvl_extrinsics: Pose | None = None,
) -> ReplayResult:
    """Run the estimator over pre-recorded logs.

    Measurement lists must be sorted by timestamp. Candidates are processed in
    list order at the moment their query keyframe is inserted; a candidate
    whose endpoints are not both in the graph (dropped or not yet inserted) is
    recorded as dropped.
    """
    cfg = config if config is not None else ReplayConfig()
    kf_times = np.asarray(keyframe_times, dtype=float)
    if kf_times.ndim != 1 or kf_times.size == 0:
        raise ValueError("replay: need at least one keyframe time")
    if np.any(np.diff(kf_times) <= 0):
        raise ValueError("replay: keyframe times must be strictly increasing")

    imu = list(imu)
    imu_t = np.array([m.t for m in imu], dtype=float)
    dvl = list(dvl)
    dvl_t = np.array([m.t for m in dvl], dtype=float)
    baro = list(baro)
    baro_t = np.array([m.t for m in baro], dtype=float)
    for name, arr in (("imu", imu_t), ("dvl", dvl_t), ("baro", baro_t)):
        if arr.size > 1 and np.any(np.diff(arr) < 0):
            raise ValueError(f"replay: {name} log is not sorted by timestamp")
    dvl_window = _half_period(dvl_t)
    baro_window = _half_period(baro_t)
    dvl_used = np.zeros(dvl_t.size, dtype=bool)
    baro_used = np.zeros(baro_t.size, dtype=bool)

    by_query: dict[int, list[RegistrationCandidate]] = defaultdict(list)
    for cand in candidates:
        by_query[int(cand.query_id)].append(cand)

    reg_cov = np.diag(
        [cfg.effective(cfg.reg_rot_sigma) ** 2] * 3
        + [cfg.effective(cfg.reg_trans_sigma) ** 2] * 3
    )
    rw_sigmas = tuple(r * cfg.inflation for r in cfg.bias_rw_sigmas)
    graph = FactorGraph(
        cam_extrinsics=cam_extrinsics,
        dvl_extrinsics=dvl_extrinsics,
        config=cfg.solver,
        prior_sigmas=DEFAULT_PRIOR_SIGMAS * cfg.inflation,
    )

    def measured_omega(t: float) -> np.ndarray:
        if imu_t.size == 0:
            return np.zeros(3)
        j = min(int(np.searchsorted(imu_t, t)), imu_t.size - 1)
        if j > 0 and abs(imu_t[j - 1] - t) < abs(imu_t[j] - t):
            j -= 1
        return np.asarray(imu[j].gyro, dtype=float)

    def attach_aiding(idx: int, t: float) -> None:
        j = _nearest_within(dvl_t, dvl_used, t, dvl_window)
        if j is not None:
            dvl_used[j] = True
            graph.add_dvl_factor(
                idx, dvl[j].velocity, measured_omega(dvl[j].t), cfg.effective(cfg.dvl_sigma)
            )
        j = _nearest_within(baro_t, baro_used, t, baro_window)
        if j is not None:
            baro_used[j] = True
            graph.add_baro_factor(idx, baro[j].depth, cfg.effective(cfg.baro_sigma))

    stereo_s = cfg.service.stereo_ms / 1e3
    optimize_s = cfg.service.optimize_ms / 1e3
    registration_s = cfg.service.registration_ms / 1e3
    clock = float(kf_times[0])

    index_of: dict[int, int] = {}
    keyframe_ids: list[int] = []
    dropped_ids: list[int] = []
    events: list[dict] = []
    pre_ms: list[float] = []
    opt_ms: list[float] = []
    reg_ms: list[float] = []
    solver_final: dict = {}
    total_iterations = 0
    wall_start = time.perf_counter()

    def drop_candidates(orig_id: int) -> None:
        for cand in by_query.get(orig_id, ()):
            events.append(
                {
                    "query_id": int(cand.query_id),
                    "match_id": int(cand.match_id),
                    "status": "dropped",
                    "distance": None,
                }
            )

    for k, t in enumerate(kf_times):
        t = float(t)
        if cfg.real_time and k > 0:
            pickup = max(clock, t)
            if pickup - t > cfg.service.stale_after_s:
                dropped_ids.append(k)
                drop_candidates(k)
                continue
            clock = pickup + stereo_s + optimize_s

        if k == 0:
            idx = graph.add_keyframe(state=initial_state, timestamp=t)
            attach_aiding(idx, t)
            report = graph.optimize()
        else:
            prev_t = graph.states[-1].timestamp
            lo = int(np.searchsorted(imu_t, prev_t, side="left"))
            hi = int(np.searchsorted(imu_t, t, side="left"))
            if hi <= lo:
                raise ValueError(
                    f"replay: no IMU samples cover keyframe interval [{prev_t:g}, {t:g})"
                )
            prev_state = graph.states[-1]
            t0 = time.perf_counter()
            pre = preintegrate(
                imu[lo:hi],
                gyro_bias_ref=prev_state.gyro_bias,
                accel_bias_ref=prev_state.accel_bias,
                gyro_sigma=cfg.effective(cfg.gyro_sigma),
                accel_sigma=cfg.effective(cfg.accel_sigma),
                end_time=t,
            )
            t1 = time.perf_counter()
            idx = graph.add_keyframe(timestamp=t, preint=pre, bias_rw_sigmas=rw_sigmas)
            attach_aiding(idx, t)
            report = graph.optimize()
            t2 = time.perf_counter()
            pre_ms.append((t1 - t0) * 1e3)
            opt_ms.append((t2 - t1) * 1e3)
        solver_final = report
        total_iterations += report["iterations"]
        index_of[k] = idx
        keyframe_ids.append(k)

        for cand in by_query.get(k, ()):
            if not cfg.use_registration:
                events.append(
                    {
                        "query_id": int(cand.query_id),
                        "match_id": int(cand.match_id),
                        "status": "skipped",
                        "distance": None,
                    }
                )
                continue
            match_idx = index_of.get(int(cand.match_id))
            if match_idx is None:
                events.append(
                    {
                        "query_id": int(cand.query_id),
                        "match_id": int(cand.match_id),
                        "status": "dropped",
                        "distance": None,
                    }
                )
                continue
            t0 = time.perf_counter()
            res = graph.process_registration(idx, match_idx, cand.transform, reg_cov)
            elapsed = (time.perf_counter() - t0) * 1e3
            reg_ms.append(elapsed)
            if cfg.real_time:
                clock += registration_s
            events.append(
                {
                    "query_id": int(cand.query_id),
                    "match_id": int(cand.match_id),
                    "status": "accepted" if res["added"] else "gated_out",
                    "distance": res["distance"],
                }
            )

    return ReplayResult(
        graph=graph,
        offered=int(kf_times.size),
        keyframe_ids=keyframe_ids,
        dropped_ids=dropped_ids,
        index_of=index_of,
        registration_events=events,
        preintegrate_ms=pre_ms,
        optimize_ms=opt_ms,
        registration_ms=reg_ms,
        solver_final=solver_final,
        total_iterations=total_iterations,
        wall_s=time.perf_counter() - wall_start,
    )


# ---------------------------------------------------------------------------
# run report
# ---------------------------------------------------------------------------


def _timing_stats(samples) -> dict:
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        return {"count": 0, "mean_ms": 0.0, "std_ms": 0.0, "median_ms": 0.0, "p90_ms": 0.0, "max_ms": 0.0}
    return {
        "count": int(arr.size),
        "mean_ms": float(arr.mean()),
        "std_ms": float(arr.std()),
        "median_ms": float(np.median(arr)),
        "p90_ms": float(np.percentile(arr, 90)),
        "max_ms": float(arr.max()),
    }


def build_report(result: ReplayResult, config: ReplayConfig) -> dict:
    """Run statistics: drop accounting, per-stage timing, solver summary."""
    status_counts = {"accepted": 0, "gated_out": 0, "dropped": 0, "skipped": 0}
    for ev in result.registration_events:
        status_counts[ev["status"]] += 1
    offered_regs = len(result.registration_events)
    processed_regs = status_counts["accepted"] + status_counts["gated_out"]
    return {
        "keyframes": {
            "offered": result.offered,
            "processed": len(result.keyframe_ids),
            "dropped": len(result.dropped_ids),
            "drop_pct": 100.0 * len(result.dropped_ids) / max(result.offered, 1),
        },
        "registration": {
            "offered": offered_regs,
            "processed": processed_regs,
            "accepted": status_counts["accepted"],
            "gated_out": status_counts["gated_out"],
            "dropped": status_counts["dropped"],
            "skipped": status_counts["skipped"],
            "drop_pct": 100.0 * status_counts["dropped"] / max(offered_regs, 1),
        },
        "timing": {
            # the stereo stage is modeled by its nominal service time (depths
            # arrive precomputed); optimization/preintegration are measured
            "stereo_inference": {
                "nominal_ms": config.service.stereo_ms,
                "modeled": config.real_time,
            },
            "preintegration": _timing_stats(result.preintegrate_ms),
            "optimization": _timing_stats(result.optimize_ms),
            "registration": _timing_stats(result.registration_ms),
        },
        "solver": {
            "final": result.solver_final,
            "total_iterations": result.total_iterations,
        },
        "real_time": config.real_time,
        "wall_s": result.wall_s,
    }
