"""Relative pose error, trajectory integration and short-snippet ATE."""
from dataclasses import dataclass, asdict

import numpy as np

from .dataio import MAX_DIFF, Trajectory
from .errors import InsufficientDataError, OrderError
from .geometry import Pose, pose_compose, pose_inverse, twist_to_pose


@dataclass
class PairError:
    trans_error: float
    rot_error: float
    timestamp: float = 0.0


@dataclass
class Stats:
    rmse: float
    mean: float
    median: float
    std: float
    count: int

    @classmethod
    def of(cls, values):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            raise InsufficientDataError("cannot summarize an empty list")
        return cls(float(np.sqrt(np.mean(v * v))), float(np.mean(v)), float(np.median(v)),
                   float(np.std(v)), int(v.size))

    def as_dict(self):
        return asdict(self)


@dataclass
class ErrorSummary:
    translation: Stats
    rotation: Stats = None

    @property
    def count(self):
        return self.translation.count

    def as_dict(self):
        return {"translation": self.translation.as_dict(),
                "rotation": None if self.rotation is None else self.rotation.as_dict()}


def relative_pose_error(pred: Pose, gt: Pose) -> PairError:
    d = pose_compose(pose_inverse(pred), gt)
    c = (np.trace(d.rotation) - 1.0) / 2.0
    return PairError(float(np.linalg.norm(d.translation)), float(np.arccos(min(1.0, max(-1.0, c)))))


def summarize(pairs) -> ErrorSummary:
    pairs = list(pairs)
    if not pairs:
        raise InsufficientDataError("cannot summarize an empty list of pair errors")
    return ErrorSummary(Stats.of([p.trans_error for p in pairs]), Stats.of([p.rot_error for p in pairs]))


def integrate_trajectory(velocities, t0=None) -> Trajectory:
    """Chain per-interval poses ``exp(delta * T)`` starting from the identity.

    ``velocities`` yields ``(timestamp, CameraVelocity, delta)`` with the
    camera's own twist; the pose at ``timestamp + delta`` is appended for
    each record.  ``t0`` defaults to the first record's timestamp.
    """
    records = list(velocities)
    if not records:
        raise InsufficientDataError("no velocities to integrate")
    ts = [records[0][0] if t0 is None else t0]
    poses = [Pose.identity()]
    for t, T, delta in records:
        if t < ts[-1] - 1e-9:
            raise OrderError(f"velocity timestamps must be non-decreasing ({t} after {ts[-1]})")
        poses.append(pose_compose(poses[-1], twist_to_pose(T, delta)))
        ts.append(t + delta)
    return Trajectory(np.array(ts), poses)


def associate_trajectories(pred, gt, max_diff=MAX_DIFF):
    """Pairs ``(pred_index, gt_pose)``; gt poses interpolated at the prediction timestamps."""
    out = []
    for i, t in enumerate(pred.timestamps):
        if len(gt) == 0:
            break
        _, dt = gt.nearest(t)
        if dt <= max_diff:
            out.append((i, gt.interpolate(t)))
    return out


def relative_errors(pred, gt, max_diff=MAX_DIFF, delta=1):
    """Per-pair RPE between associated frames ``delta`` steps apart."""
    assoc = associate_trajectories(pred, gt, max_diff)
    errs = []
    for (i, g0), (j, g1) in zip(assoc[:-delta], assoc[delta:]):
        rel_p = pose_compose(pose_inverse(pred.poses[i]), pred.poses[j])
        rel_g = pose_compose(pose_inverse(g0), g1)
        e = relative_pose_error(rel_p, rel_g)
        e.timestamp = float(pred.timestamps[i])
        errs.append(e)
    return errs


def align_rigid(model, data):
    """Rotation R and translation t minimizing ``|model - (R data + t)|`` (Kabsch, no scale)."""
    mu_m = model.mean(axis=0)
    mu_d = data.mean(axis=0)
    C = (model - mu_m).T @ (data - mu_d)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    return R, mu_m - R @ mu_d


def ate_snippets(pred, gt, snippet_len=5, max_diff=MAX_DIFF) -> ErrorSummary:
    """Position RMSE of every ``snippet_len``-frame window after rigid alignment to ground truth."""
    assoc = associate_trajectories(pred, gt, max_diff)
    if len(assoc) < snippet_len:
        raise InsufficientDataError(f"need at least {snippet_len} associated frames, got {len(assoc)}")
    P = np.array([pred.poses[i].translation for i, _ in assoc])
    G = np.array([g.translation for _, g in assoc])
    errs = []
    for k in range(len(assoc) - snippet_len + 1):
        p, g = P[k:k + snippet_len], G[k:k + snippet_len]
        R, t = align_rigid(g, p)
        res = g - (p @ R.T + t)
        errs.append(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    return ErrorSummary(Stats.of(errs))
