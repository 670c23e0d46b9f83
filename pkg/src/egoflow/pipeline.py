"""Sequence-level estimation: flow, ego-motion fit, layers, losses and per-pair reports."""
import copy
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataio import MAX_DIFF, load_intrinsics, load_tum_sequence, read_flo, save_trajectory
from .egomotion import RobustConfig, irls_fit
from .errors import ConfigError, DatasetError, EgoflowError
from .evaluation import ErrorSummary, PairError, Stats, integrate_trajectory, relative_pose_error
from .flowwarp import DEFAULT_LAMBDAS, compute_losses
from .geometry import (CameraVelocity, camera_motion, pose_compose, pose_inverse,
                       synthesize_motion_field, twist_to_pose)
from .layers import LayerConfig, SymmetryPolicy, fit_two_layers, resolve_static_layer
from .opticalflow import FlowConfig, compute_flow

log = logging.getLogger(__name__)

ENV_DATASET_ROOT = "EGOFLOW_DATASET_ROOT"


@dataclass
class RunConfig:
    dataset: str = None
    intrinsics: str = None
    flow_source: str = "computed"
    layer_mode: str = "single"
    symmetry_policy: str = "larger-support"
    length_scale: float = 1.0
    output: str = "out"
    stride: int = 1
    lambdas: tuple = DEFAULT_LAMBDAS
    workers: int = 1
    max_diff: float = MAX_DIFF
    first: int = 0
    limit: int = None
    write_masks: bool = True
    robust: RobustConfig = field(default_factory=RobustConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    layers: LayerConfig = field(default_factory=LayerConfig)

    def resolved(self):
        """Copy with dataset/intrinsics paths resolved and validated."""
        cfg = copy.deepcopy(self)
        if cfg.dataset is None:
            raise ConfigError("no dataset given")
        ds = Path(cfg.dataset)
        root = os.environ.get(ENV_DATASET_ROOT)
        if not ds.is_absolute() and not ds.exists() and root:
            ds = Path(root) / ds
        if not ds.is_dir():
            raise DatasetError(f"dataset directory not found: {ds}")
        cfg.dataset = str(ds)
        if cfg.intrinsics is None:
            cfg.intrinsics = str(ds / "intrinsics.txt") if (ds / "intrinsics.txt").is_file() else "default"
        if cfg.flow_source != "computed" and not Path(cfg.flow_source).is_dir():
            cand = ds / cfg.flow_source
            if not cand.is_dir():
                raise DatasetError(f"flow directory not found: {cfg.flow_source}")
            cfg.flow_source = str(cand)
        if cfg.layer_mode not in ("single", "two-layer"):
            raise ConfigError(f"layer_mode must be 'single' or 'two-layer', got {cfg.layer_mode!r}")
        SymmetryPolicy(cfg.symmetry_policy, cfg.length_scale)
        cfg.lambdas = tuple(float(v) for v in cfg.lambdas)
        if len(cfg.lambdas) != 3:
            raise ConfigError("lambdas must have three entries (of, mf, op)")
        cfg.layers.robust = cfg.robust
        cfg.robust.stride = cfg.stride
        return cfg

    def as_dict(self):
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["layers"].pop("robust", None)
        return d


_SECTIONS = {"robust": RobustConfig, "flow": FlowConfig, "layers": LayerConfig}


def _coerce(value, current, name):
    if value.lower() in ("none", "null"):
        return None
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(current, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_overrides(config, kv):
    """Apply ``key=value`` settings; nested settings use ``robust.kernel``, ``flow.alpha``, ``layers.margin``."""
    top = {f.name: f for f in fields(RunConfig)}
    for key, value in kv.items():
        key = key.strip().replace("-", "_")
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            obj = getattr(config, section)
            if name not in {f.name for f in fields(obj)}:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(obj, name, _coerce(value, getattr(obj, name), key))
            obj.__post_init__()
        elif key in top and key not in _SECTIONS:
            current = getattr(config, key)
            if key == "limit":
                current = 0
            setattr(config, key, _coerce(value, current, key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return config


def _flow_path(flow_dir, t):
    return Path(flow_dir) / f"{t:.6f}.flo"


def estimate_pair(pair, intrinsics, config, flow_dir=None, gt_rel=None):
    """Run flow, ego-motion fit and losses on one frame pair; returns a report record."""
    rec = {"timestamp": pair.t, "t_next": pair.t_next, "delta": pair.delta}
    if flow_dir is None:
        flow = compute_flow(pair.i_t, pair.i_next, config.flow)
    else:
        path = _flow_path(flow_dir, pair.t)
        if not path.is_file():
            raise DatasetError(f"missing flow file {path}")
        flow = read_flo(path)
    if flow.shape != intrinsics.shape:
        raise DatasetError(f"flow {flow.shape} does not match intrinsics {intrinsics.shape}")
    rho = pair.depth_t
    field = flow.to_motion_field(intrinsics)
    layered = None
    if config.layer_mode == "two-layer":
        layered = fit_two_layers(rho, field, intrinsics, config.layers)
        layered = resolve_static_layer(layered, SymmetryPolicy(config.symmetry_policy, config.length_scale))
        fit = layered.static_fit
        model = layered.composite_field
        rec["layers"] = layered.diagnostics()
    else:
        fit, _ = irls_fit(rho, field, intrinsics, config.robust)
        model = synthesize_motion_field(rho, fit.T, intrinsics)
    rec["fit"] = fit.diagnostics()
    losses = compute_losses(pair.i_t, pair.i_next, flow, model, rho.valid, intrinsics, config.lambdas)
    rec["losses"] = losses.as_dict()
    cam = camera_motion(fit.T)
    rec["camera_velocity"] = [float(v) for v in cam.vector / pair.delta]
    if gt_rel is not None:
        err = relative_pose_error(twist_to_pose(cam, 1.0), gt_rel)
        rec["trans_error"] = err.trans_error
        rec["rot_error"] = err.rot_error
    return rec, layered


@dataclass
class EstimateResult:
    config: RunConfig
    records: list
    trajectory: object
    summary: ErrorSummary
    failed: int
    skipped_frames: int

    @property
    def failure_ratio(self):
        return self.failed / max(len(self.records), 1)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def format_table(summary, title="relative pose error"):
    lines = [f"{title} over {summary.count} pairs",
             f"{'':12s}{'rmse':>12s}{'mean':>12s}{'median':>12s}{'std':>12s}"]
    t = summary.translation
    lines.append(f"{'trans [m]':12s}{t.rmse:12.6f}{t.mean:12.6f}{t.median:12.6f}{t.std:12.6f}")
    if summary.rotation is not None:
        r = summary.rotation
        d = np.degrees
        lines.append(f"{'rot [deg]':12s}{d(r.rmse):12.6f}{d(r.mean):12.6f}{d(r.median):12.6f}{d(r.std):12.6f}")
    return "\n".join(lines)


def run_estimate(config: RunConfig) -> EstimateResult:
    cfg = config.resolved()
    K = load_intrinsics(cfg.intrinsics)
    seq = load_tum_sequence(cfg.dataset, cfg.max_diff, first=cfg.first, limit=cfg.limit)
    flow_dir = None if cfg.flow_source == "computed" else cfg.flow_source
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.write_masks and cfg.layer_mode == "two-layer":
        (out / "masks").mkdir(exist_ok=True)
    gt = seq.groundtruth

    def work(k):
        pair = seq.pair(k)
        g0, g1 = gt.interpolate(pair.t), gt.interpolate(pair.t_next)
        gt_rel = pose_compose(pose_inverse(g0), g1)
        try:
            rec, layered = estimate_pair(pair, K, cfg, flow_dir, gt_rel)
            rec["status"] = "ok"
            if layered is not None and cfg.write_masks:
                layered.mask.save(out / "masks" / f"{pair.t:.6f}.png")
        except DatasetError:
            raise
        except EgoflowError as e:
            rec = {"timestamp": pair.t, "t_next": pair.t_next, "delta": pair.delta,
                   "status": "failed", "error": str(e)}
        rec["_gt_rel"] = gt_rel
        return rec

    n = len(seq)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            records = list(ex.map(work, range(n)))
    else:
        records = [work(k) for k in range(n)]

    velocities, errors = [], []
    prev = CameraVelocity()
    failed = 0
    for rec in records:
        gt_rel = rec.pop("_gt_rel")
        if rec["status"] == "ok":
            vel = CameraVelocity.from_vector(rec["camera_velocity"])
            rec["interpolated"] = False
        else:
            failed += 1
            vel = prev
            rec["interpolated"] = True
            rec["camera_velocity"] = [float(v) for v in vel.vector]
            err = relative_pose_error(twist_to_pose(vel, rec["delta"]), gt_rel)
            rec["trans_error"], rec["rot_error"] = err.trans_error, err.rot_error
        prev = vel
        velocities.append((rec["timestamp"], vel, rec["delta"]))
        errors.append(PairError(rec["trans_error"], rec["rot_error"], rec["timestamp"]))

    traj = integrate_trajectory(velocities)
    summary = ErrorSummary(Stats.of([e.trans_error for e in errors]), Stats.of([e.rot_error for e in errors]))
    result = EstimateResult(cfg, records, traj, summary, failed, seq.skipped)
    save_trajectory(out / "trajectory.txt", traj)
    write_reports(out, result)
    return result


def write_reports(out, result):
    cfg = result.config
    with open(out / "pairs.jsonl", "w") as fh:
        for rec in result.records:
            row = {"timestamp": rec["timestamp"], "trans_error": rec["trans_error"], "rot_error": rec["rot_error"],
                   "residual_rms": rec.get("fit", {}).get("residual_rms"),
                   "support": rec.get("fit", {}).get("support"),
                   "converged": rec.get("fit", {}).get("converged", False),
                   "status": rec["status"]}
            fh.write(json.dumps(row, sort_keys=True, default=_json_default) + "\n")
    dump_json(out / "report.json", {
        "config": cfg.as_dict(),
        "intrinsics": load_intrinsics(cfg.intrinsics).as_dict(),
        "units": {"camera_velocity": "per second (m/s, rad/s)", "fit.twist": "scene motion per frame interval",
                  "trans_error": "m per pair", "rot_error": "rad per pair",
                  "losses": "mean over valid pixels, grayscale intensities in [0,1] / pixels"},
        "summary": result.summary.as_dict(),
        "failed_pairs": result.failed,
        "skipped_frames": result.skipped_frames,
        "pairs": result.records,
    })
    (out / "summary.txt").write_text(format_table(result.summary) + "\n"
                                     + f"failed pairs: {result.failed} of {len(result.records)}\n")
