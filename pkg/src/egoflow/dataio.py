"""TUM RGB-D ingestion and the on-disk formats: trajectories, depth, flow files, key=value configs."""
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DatasetError, OrderError, ParseError, ShapeError
from .geometry import PRESETS, CameraIntrinsics, FlowField, InverseDepthMap, Pose, slerp

log = logging.getLogger(__name__)

DEPTH_FACTOR = 5000.0
MAX_DIFF = 0.02
FLO_TAG = b"PIEH"
FLO_UNKNOWN = 1e9


# --- key=value files ---------------------------------------------------------

def read_keyvalue(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {raw.strip()!r}", path, lineno)
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def load_intrinsics(spec):
    """Intrinsics from a preset name or a key=value file with fx, fy, cx, cy, width, height."""
    if isinstance(spec, CameraIntrinsics):
        return spec
    if str(spec) in PRESETS:
        return PRESETS[str(spec)]
    if not os.path.exists(spec):
        raise DatasetError(f"unknown intrinsics preset or missing file: {spec}")
    kv = read_keyvalue(spec)
    try:
        return CameraIntrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                                int(kv["width"]), int(kv["height"]))
    except KeyError as e:
        raise ParseError(f"intrinsics file is missing {e.args[0]!r}", spec) from None


def save_intrinsics(path, intrinsics):
    with open(path, "w") as fh:
        for k, v in intrinsics.as_dict().items():
            fh.write(f"{k} = {v!r}\n")


# --- trajectories --------------------------------------------------------------

@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ShapeError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise OrderError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def nearest(self, t):
        """Index of the pose closest in time to ``t`` and its time offset."""
        i = int(np.searchsorted(self.timestamps, t))
        cands = [j for j in (i - 1, i) if 0 <= j < len(self)]
        j = min(cands, key=lambda k: abs(self.timestamps[k] - t))
        return j, abs(self.timestamps[j] - t)

    def interpolate(self, t):
        """Pose at time ``t``: linear in position, spherical in orientation."""
        ts = self.timestamps
        if t <= ts[0]:
            return self.poses[0]
        if t >= ts[-1]:
            return self.poses[-1]
        i = int(np.searchsorted(ts, t)) - 1
        if ts[i + 1] == t:
            return self.poses[i + 1]
        a = (t - ts[i]) / (ts[i + 1] - ts[i])
        p0, p1 = self.poses[i], self.poses[i + 1]
        q = slerp(p0.quaternion(), p1.quaternion(), a)
        return Pose.from_quaternion(q, (1 - a) * p0.translation + a * p1.translation)


def format_pose_line(t, pose):
    q = pose.quaternion()
    vals = [t, *pose.translation, *q]
    return " ".join(f"{v:.6f}" for v in vals)


def save_trajectory(path, traj):
    with open(path, "w") as fh:
        for t, pose in zip(traj.timestamps, traj.poses):
            fh.write(format_pose_line(t, pose) + "\n")


def _read_records(path, ncols):
    path = str(path)
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) < ncols:
                raise ParseError(f"expected {ncols} fields, got {len(parts)}", path, lineno)
            rows.append((lineno, parts))
    return rows


def load_trajectory(path):
    """Read a TUM trajectory ``timestamp tx ty tz qx qy qz qw``; quaternions are normalized."""
    stamps, poses = [], []
    for lineno, parts in _read_records(path, 8):
        try:
            vals = [float(v) for v in parts[:8]]
        except ValueError:
            raise ParseError(f"non-numeric field in {' '.join(parts)!r}", str(path), lineno) from None
        q = np.array(vals[4:8])
        n = np.linalg.norm(q)
        if not n > 0:
            raise ParseError("zero quaternion", str(path), lineno)
        if stamps and vals[0] <= stamps[-1]:
            raise ParseError("timestamps must be strictly increasing", str(path), lineno)
        stamps.append(vals[0])
        poses.append(Pose.from_quaternion(q / n, vals[1:4]))
    return Trajectory(np.array(stamps), poses)


# --- images, depth, flow ------------------------------------------------------

def load_image(path):
    """Image as floats in [0, 1] (RGB order for color); also returns the source bit depth."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot read image {path}")
    bits = 16 if raw.dtype == np.uint16 else 8
    img = raw.astype(float) / (65535.0 if bits == 16 else 255.0)
    if img.ndim == 3:
        img = img[..., :3][..., ::-1]
    return img, bits


def save_image(path, img):
    """Write a [0, 1] float image (gray or RGB) as 8-bit PNG."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"cannot write {path}")


def load_depth(path, factor=DEPTH_FACTOR):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot read depth image {path}")
    return decode_depth(raw, factor)


def decode_depth(raw, factor=DEPTH_FACTOR):
    """Inverse depth from raw 16-bit depth; raw 0 marks missing depth."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ShapeError(f"depth image must be single channel, got {raw.shape}")
    return InverseDepthMap.from_depth(raw.astype(float) / factor)


def encode_depth(depth, factor=DEPTH_FACTOR):
    depth = np.asarray(depth, dtype=float)
    raw = np.where(np.isfinite(depth) & (depth > 0), np.round(depth * factor), 0)
    return np.clip(raw, 0, 65535).astype(np.uint16)


def save_depth(path, depth, factor=DEPTH_FACTOR):
    save_raw_depth(path, encode_depth(depth, factor))


def save_raw_depth(path, raw):
    if not cv2.imwrite(str(path), np.asarray(raw, dtype=np.uint16)):
        raise OSError(f"cannot write {path}")


def write_flo(path, flow):
    """Middlebury ``.flo``: 'PIEH', int32 width, int32 height, then row-major float32 (u, v)."""
    if isinstance(flow, FlowField):
        data = np.where(flow.valid[..., None], flow.flow, 2 * FLO_UNKNOWN)
    else:
        data = np.asarray(flow)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_TAG)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        tag = fh.read(4)
        if tag != FLO_TAG:
            raise ParseError(f"bad .flo tag {tag!r}", str(path))
        w, h = struct.unpack("<ii", fh.read(8))
        if w <= 0 or h <= 0:
            raise ParseError(f"bad .flo size {w}x{h}", str(path))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * 2:
        raise ParseError(f"expected {w * h * 2} floats, got {data.size}", str(path))
    flow = data.reshape(h, w, 2).astype(float)
    valid = np.all(np.isfinite(flow) & (np.abs(flow) < FLO_UNKNOWN), axis=-1)
    flow[~valid] = 0.0
    return FlowField(flow, valid)


def _make_colorwheel():
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    c = 0
    for n, ramp_ch, fixed_ch, up in ((ry, 1, 0, True), (yg, 0, 1, False), (gc, 2, 1, True),
                                     (cb, 1, 2, False), (bm, 0, 2, True), (mr, 2, 0, False)):
        ramp = np.arange(n) / n
        wheel[c:c + n, fixed_ch] = 255
        wheel[c:c + n, ramp_ch] = 255 * (ramp if up else 1 - ramp)
        c += n
    return wheel


COLORWHEEL = _make_colorwheel()


def flow_to_color(flow, max_norm=None):
    """Middlebury color-wheel encoding of a pixel flow as uint8 RGB."""
    f, valid = (flow.flow, flow.valid) if isinstance(flow, FlowField) else (np.asarray(flow), None)
    u, v = f[..., 0], f[..., 1]
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(mag.max()) if mag.size and mag.max() > 0 else 1.0
    u, v, mag = u / max_norm, v / max_norm, mag / max_norm
    ncols = len(COLORWHEEL)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[..., None]
    col = ((1 - frac) * COLORWHEEL[k0] + frac * COLORWHEEL[k1]) / 255.0
    m = np.minimum(mag, 1.0)[..., None]
    col = np.where(mag[..., None] <= 1, 1 - m * (1 - col), col * 0.75)
    out = np.floor(255 * col).astype(np.uint8)
    if valid is not None:
        out[~valid] = 0
    return out


# --- TUM sequences -------------------------------------------------------------

def read_file_list(path):
    """TUM index file (``timestamp filename ...``) as a list of (timestamp, fields)."""
    out = []
    for lineno, parts in _read_records(path, 2):
        try:
            out.append((float(parts[0]), parts[1:]))
        except ValueError:
            raise ParseError(f"bad timestamp {parts[0]!r}", str(path), lineno) from None
    return out


def associate(first, second, max_diff=MAX_DIFF, offset=0.0):
    """Match two timestamp lists greedily by smallest difference, as the TUM tools do.

    Returns sorted index pairs ``(i, j)``; each element is used at most once.
    """
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float) + offset
    cands = []
    for i, a in enumerate(first):
        lo = np.searchsorted(second, a - max_diff, side="left")
        hi = np.searchsorted(second, a + max_diff, side="right")
        for j in range(lo, hi):
            d = abs(a - second[j])
            if d <= max_diff:
                cands.append((d, i, j))
    cands.sort()
    used_a, used_b, matches = set(), set(), []
    for d, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    return sorted(matches)


@dataclass
class FramePair:
    i_t: np.ndarray
    i_next: np.ndarray
    depth_t: InverseDepthMap
    t: float
    t_next: float
    depth_next: InverseDepthMap = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.t_next > self.t:
            raise OrderError(f"frame interval must be positive ({self.t} -> {self.t_next})")

    @property
    def delta(self):
        return self.t_next - self.t


@dataclass
class Frame:
    timestamp: float
    rgb_path: Path
    depth_timestamp: float
    depth_path: Path


class TUMSequence:
    """Associated frames of a TUM RGB-D directory; frame pairs are decoded lazily."""

    def __init__(self, root, frames, groundtruth, skipped, depth_factor=DEPTH_FACTOR):
        self.root = Path(root)
        self.frames = frames
        self.groundtruth = groundtruth
        self.skipped = skipped
        self.depth_factor = depth_factor

    def __len__(self):
        return max(len(self.frames) - 1, 0)

    def load_frame(self, k):
        fr = self.frames[k]
        img, bits = load_image(fr.rgb_path)
        return img, load_depth(fr.depth_path, self.depth_factor), bits

    def pair(self, k, with_next_depth=False):
        a, b = self.frames[k], self.frames[k + 1]
        i_t, bits = load_image(a.rgb_path)
        i_next, _ = load_image(b.rgb_path)
        depth_t = load_depth(a.depth_path, self.depth_factor)
        depth_next = load_depth(b.depth_path, self.depth_factor) if with_next_depth else None
        return FramePair(i_t, i_next, depth_t, a.timestamp, b.timestamp, depth_next,
                         {"bit_depth": bits, "rgb_t": str(a.rgb_path), "rgb_next": str(b.rgb_path)})

    def pairs(self, limit=None):
        n = len(self) if limit is None else min(limit, len(self))
        for k in range(n):
            yield self.pair(k)

    @property
    def timestamps(self):
        return np.array([f.timestamp for f in self.frames])


def load_tum_sequence(root, max_diff=MAX_DIFF, depth_factor=DEPTH_FACTOR, first=0, limit=None):
    """Associate rgb, depth and ground truth of a TUM directory.

    Frames whose depth or ground truth lies farther than ``max_diff`` seconds
    away are skipped and counted. ``first``/``limit`` select a slice of the
    associated frames.
    """
    root = Path(root)
    for name in ("rgb.txt", "depth.txt", "groundtruth.txt"):
        if not (root / name).is_file():
            raise DatasetError(f"missing index file {root / name}")
    rgb = read_file_list(root / "rgb.txt")
    depth = read_file_list(root / "depth.txt")
    gt = load_trajectory(root / "groundtruth.txt")
    matches = associate([r[0] for r in rgb], [d[0] for d in depth], max_diff)
    frames = []
    for i, j in matches:
        t = rgb[i][0]
        if len(gt) == 0 or gt.nearest(t)[1] > max_diff:
            continue
        frames.append(Frame(t, root / rgb[i][1][0], depth[j][0], root / depth[j][1][0]))
    skipped = len(rgb) - len(frames)
    if skipped:
        log.warning("%s: skipped %d of %d rgb frames without depth/ground truth within %.3f s",
                    root, skipped, len(rgb), max_diff)
    frames = frames[first:]
    if limit is not None:
        frames = frames[:limit + 1]
    if len(frames) < 2:
        raise DatasetError(f"{root}: no associated frame pairs")
    return TUMSequence(root, frames, gt, skipped, depth_factor)
