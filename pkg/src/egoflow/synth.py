"""Synthetic ground truth: procedural scenes with planted twists, rendered pairs and TUM-style sequences."""
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataio import (FramePair, Trajectory, decode_depth, encode_depth, save_image, save_intrinsics,
                     save_raw_depth, save_trajectory, write_flo)
from .errors import ConfigError, ValidityError
from .geometry import (CameraIntrinsics, CameraVelocity, InverseDepthMap, Pose,
                       normalized_grid, pose_compose, synthesize_motion_field, twist_to_pose)
from .layers import SegmentationMask, composite_motion_field

MIN_RESOLUTION = 32
MAX_DISPLACEMENT = 0.05


class ProceduralTexture:
    """Band-limited random sum of sinusoids, evaluable at arbitrary (x, y) in pixels."""

    def __init__(self, rng, n_waves=32, fmin=0.02, fmax=0.12, contrast=0.4):
        f = np.exp(rng.uniform(np.log(fmin), np.log(fmax), n_waves))
        theta = rng.uniform(0, np.pi, n_waves)
        self.k = 2 * np.pi * np.stack([f * np.cos(theta), f * np.sin(theta)], axis=1)
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        amp = 1.0 / f
        self.amp = amp * (contrast / np.sqrt(0.5 * np.sum(amp ** 2)))

    def __call__(self, X, Y):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        out = np.full(np.broadcast(X, Y).shape, 0.5)
        for (kx, ky), ph, a in zip(self.k, self.phase, self.amp):
            out += 0.5 * a * np.cos(kx * X + ky * Y + ph)
        return np.clip(out, 0.0, 1.0)


@dataclass
class SceneConfig:
    width: int = 96
    height: int = 72
    focal: float = None
    depth_range: tuple = (0.5, 5.0)
    depth_smoothness: float = 0.15
    max_displacement: float = 0.02
    twist: tuple = None
    two_body: bool = False
    dynamic_fraction: float = 0.3
    dynamic_twist: tuple = None
    frame_interval: float = 1.0 / 30.0

    def __post_init__(self):
        if self.width < MIN_RESOLUTION or self.height < MIN_RESOLUTION:
            raise ConfigError(f"resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}, "
                              f"got {self.width}x{self.height}")
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ConfigError(f"bad depth range {self.depth_range}")
        if self.two_body and not 0 < self.dynamic_fraction < 1:
            raise ConfigError("dynamic_fraction must lie in (0, 1)")

    def intrinsics(self):
        f = self.focal or 0.8 * self.width
        return CameraIntrinsics(f, f, self.width / 2.0, self.height / 2.0, self.width, self.height)


@dataclass
class SyntheticScene:
    config: SceneConfig
    seed: int
    intrinsics: CameraIntrinsics
    texture: ProceduralTexture
    depth: InverseDepthMap
    twist: CameraVelocity
    mask: SegmentationMask
    dynamic_twist: CameraVelocity = None

    @property
    def texture_image(self):
        h, w = self.intrinsics.shape
        X, Y = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        return self.texture(X, Y)


def _smooth_noise(rng, shape, smoothness):
    sigma = smoothness * max(shape)
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (n - n.min()) / (n.max() - n.min())


def _random_twist(rng, rho, intrinsics, max_disp_px):
    T = CameraVelocity(rng.standard_normal(3), rng.standard_normal(3) * 0.5)
    f = synthesize_motion_field(rho, T, intrinsics).to_pixel_flow(intrinsics)
    peak = np.max(np.linalg.norm(f.flow[f.valid], axis=1))
    return T.scaled(max_disp_px / peak)


def _planted_rectangle(rng, shape, fraction):
    h, w = shape
    target = fraction * h * w
    aspect = rng.uniform(0.6, 1.6)
    rw = int(round(min(w, np.sqrt(target * aspect))))
    rh = int(round(min(h, target / rw)))
    y0 = rng.integers(0, h - rh + 1)
    x0 = rng.integers(0, w - rw + 1)
    dyn = np.zeros(shape, dtype=bool)
    dyn[y0:y0 + rh, x0:x0 + rw] = True
    return dyn


def make_scene(config=None, seed=0) -> SyntheticScene:
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    K = config.intrinsics()
    lo, hi = config.depth_range
    Z = lo + (hi - lo) * _smooth_noise(rng, K.shape, config.depth_smoothness)
    rho = InverseDepthMap.from_depth(Z)
    texture = ProceduralTexture(rng)
    max_disp = config.max_displacement * config.width
    T = CameraVelocity(*np.reshape(config.twist, (2, 3))) if config.twist is not None \
        else _random_twist(rng, rho, K, max_disp)
    valid = np.ones(K.shape, dtype=bool)
    dyn_T = None
    dyn = np.zeros(K.shape, dtype=bool)
    if config.two_body:
        dyn = _planted_rectangle(rng, K.shape, config.dynamic_fraction)
        dyn_T = CameraVelocity(*np.reshape(config.dynamic_twist, (2, 3))) if config.dynamic_twist is not None \
            else _random_twist(rng, rho, K, max_disp)
    return SyntheticScene(config, seed, K, texture, rho, T, SegmentationMask(~dyn, valid), dyn_T)


def scene_motion_field(scene):
    return composite_motion_field(scene.depth, scene.mask, scene.twist, scene.dynamic_twist, scene.intrinsics)


def render_pair(scene: SyntheticScene):
    """Render ``(FramePair, ground-truth pixel flow)``.

    The second frame is the texture on the pixel grid and the first samples the
    texture at ``x + flow(x)``, so warping the second frame by the returned
    flow reproduces the first up to interpolation error.
    """
    K = scene.intrinsics
    mf = scene_motion_field(scene)
    flow = mf.to_pixel_flow(K)
    peak = float(np.max(np.linalg.norm(flow.flow, axis=-1)))
    if peak >= MAX_DISPLACEMENT * K.width:
        raise ValidityError(f"peak displacement {peak:.2f} px exceeds the continuous-motion bound "
                            f"of {MAX_DISPLACEMENT:.0%} of the image width ({MAX_DISPLACEMENT * K.width:.1f} px)")
    h, w = K.shape
    X, Y = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    i_next = scene.texture(X, Y)
    i_t = scene.texture(X + flow.flow[..., 0], Y + flow.flow[..., 1])
    dt = scene.config.frame_interval
    pair = FramePair(i_t, i_next, scene.depth, 0.0, dt, metadata={"seed": scene.seed})
    return pair, flow


# --- sequences rendered from a textured 3-D room --------------------------------

class WorldTexture:
    """Sum of 3-D plane waves; restricted to any plane it is a band-limited 2-D texture."""

    def __init__(self, rng, n_waves=24, fmin=0.8, fmax=6.0, contrast=0.35):
        f = np.exp(rng.uniform(np.log(fmin), np.log(fmax), n_waves))
        d = rng.standard_normal((n_waves, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        self.k = 2 * np.pi * f[:, None] * d
        self.phase = rng.uniform(0, 2 * np.pi, n_waves)
        amp = 1.0 / f
        self.amp = amp * (contrast / np.sqrt(0.5 * np.sum(amp ** 2)))

    def __call__(self, P):
        out = np.full(P.shape[:-1], 0.5)
        for k, ph, a in zip(self.k, self.phase, self.amp):
            out += 0.5 * a * np.cos(P @ k + ph)
        return np.clip(out, 0.0, 1.0)


@dataclass
class SequenceConfig:
    n_frames: int = 30
    width: int = 160
    height: int = 120
    focal: float = None
    frame_interval: float = 1.0 / 30.0
    t0: float = 1000.0
    room_min: tuple = (-2.0, -1.5, -1.0)
    room_max: tuple = (2.0, 1.0, 4.0)
    camera_speed: float = 0.01
    angular_speed: float = 0.004
    two_body: bool = False
    object_size: tuple = (0.5, 0.4)
    object_distance: float = 1.6
    object_speed: float = 0.012
    hole_fraction: float = 0.0

    def __post_init__(self):
        if self.width < MIN_RESOLUTION or self.height < MIN_RESOLUTION:
            raise ConfigError(f"resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}")
        if self.n_frames < 2:
            raise ConfigError("a sequence needs at least 2 frames")

    def intrinsics(self):
        f = self.focal or 0.8 * self.width
        return CameraIntrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height)

    def as_dict(self):
        return asdict(self)


@dataclass
class SyntheticSequence:
    config: SequenceConfig
    seed: int
    intrinsics: CameraIntrinsics
    timestamps: np.ndarray
    images: list
    depths: list            # InverseDepthMap decoded from the 16-bit encoding
    raw_depths: list        # uint16 as written to disk
    camera_poses: list      # world-from-camera
    twists: list            # per-pair point twists of the background (normalized, per interval)
    object_twists: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    flows: list = field(default_factory=list)   # per-pair ground-truth pixel flow

    @property
    def groundtruth(self):
        return Trajectory(self.timestamps, self.camera_poses)


def _smooth_series(rng, n, scale, size=3):
    base = rng.standard_normal(size)
    drift = rng.standard_normal((n, size))
    drift = ndimage.gaussian_filter1d(drift, 4.0, axis=0, mode="nearest")
    drift /= max(np.abs(drift).max(), 1e-12)
    v = base / np.linalg.norm(base) + 0.3 * drift
    return scale * v


def _raycast_room(K, pose, lo, hi, obj_pose, obj_half, tex_world, tex_obj):
    x, y = normalized_grid(K)
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_world = d_cam @ pose.rotation.T
    o = pose.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (np.asarray(hi) - o) / d_world
        t_lo = (np.asarray(lo) - o) / d_world
        t_axis = np.where(d_world > 0, t_hi, np.where(d_world < 0, t_lo, np.inf))
    Z = t_axis.min(axis=-1)
    P = o + Z[..., None] * d_world
    image = tex_world(P)
    on_obj = np.zeros(K.shape, dtype=bool)
    if obj_pose is not None:
        n = obj_pose.rotation[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (n @ obj_pose.translation) / (d_cam @ n)
        Pc = t[..., None] * d_cam
        local = (Pc - obj_pose.translation) @ obj_pose.rotation
        on_obj = (t > 0) & (t < Z) & (np.abs(local[..., 0]) <= obj_half[0]) & (np.abs(local[..., 1]) <= obj_half[1])
        Z = np.where(on_obj, t, Z)
        image = np.where(on_obj, tex_obj(local), image)
    return image, Z, on_obj


def make_sequence(config=None, seed=0) -> SyntheticSequence:
    """Render a camera moving through a textured box room, optionally with one moving panel.

    Ground-truth flow per pair is the continuous motion field of the planted
    twist(s) evaluated on the decoded (16-bit) depth of the first frame.
    """
    config = config or SequenceConfig()
    rng = np.random.default_rng(seed)
    K = config.intrinsics()
    n = config.n_frames
    tex_world = WorldTexture(rng)
    tex_obj = WorldTexture(rng, fmin=3.0, fmax=12.0, contrast=0.45)
    cam_tau = _smooth_series(rng, n - 1, config.camera_speed)
    cam_omega = _smooth_series(rng, n - 1, config.angular_speed)
    obj_tau = _smooth_series(rng, n - 1, config.object_speed)
    obj_omega = _smooth_series(rng, n - 1, 0.5 * config.angular_speed)
    holes = rng.random((n,) + K.shape) < config.hole_fraction

    pose = Pose.identity()
    obj_pose = None
    if config.two_body:
        obj_pose = Pose(np.eye(3), [rng.uniform(-0.2, 0.2), rng.uniform(-0.1, 0.1), config.object_distance])
    obj_half = (0.5 * config.object_size[0], 0.5 * config.object_size[1])

    seq = SyntheticSequence(config, seed, K, config.t0 + config.frame_interval * np.arange(n),
                            [], [], [], [], [])
    for k in range(n):
        img, Z, on_obj = _raycast_room(K, pose, config.room_min, config.room_max, obj_pose, obj_half,
                                       tex_world, tex_obj)
        Z = np.where(holes[k], 0.0, Z)
        raw = encode_depth(Z)
        seq.images.append(img)
        seq.raw_depths.append(raw)
        seq.depths.append(decode_depth(raw))
        seq.camera_poses.append(pose)
        seq.masks.append(SegmentationMask(~on_obj, raw > 0))
        if k == n - 1:
            break
        cam = CameraVelocity(cam_tau[k], cam_omega[k])
        T = -cam
        seq.twists.append(T)
        Tb = None
        if config.two_body:
            Tb = CameraVelocity(obj_tau[k], obj_omega[k])
            seq.object_twists.append(Tb)
            obj_pose = pose_compose(twist_to_pose(Tb), obj_pose)
        mf = composite_motion_field(seq.depths[k], seq.masks[k], T, Tb, K)
        seq.flows.append(mf.to_pixel_flow(K))
        pose = pose_compose(pose, twist_to_pose(cam))
    return seq


def write_sequence(seq: SyntheticSequence, out_dir):
    """Write a TUM-format directory plus ground-truth flow, twists, masks and intrinsics."""
    out = Path(out_dir)
    for sub in ("rgb", "depth", "flow", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    K = seq.intrinsics
    stamps = [f"{t:.6f}" for t in seq.timestamps]
    header = "# synthetic sequence seed {}\n# timestamp filename\n".format(seq.seed)
    rgb_lines, depth_lines = [header], [header]
    for k, ts in enumerate(stamps):
        save_image(out / "rgb" / f"{ts}.png", seq.images[k])
        save_raw_depth(out / "depth" / f"{ts}.png", seq.raw_depths[k])
        seq.masks[k].save(out / "mask" / f"{ts}.png")
        rgb_lines.append(f"{ts} rgb/{ts}.png\n")
        depth_lines.append(f"{ts} depth/{ts}.png\n")
    for k, flow in enumerate(seq.flows):
        write_flo(out / "flow" / f"{stamps[k]}.flo", flow)
    (out / "rgb.txt").write_text("".join(rgb_lines))
    (out / "depth.txt").write_text("".join(depth_lines))
    save_trajectory(out / "groundtruth.txt", seq.groundtruth)
    _write_twists(out / "twists.txt", stamps, seq.twists)
    if seq.object_twists:
        _write_twists(out / "object_twists.txt", stamps, seq.object_twists)
    save_intrinsics(out / "intrinsics.txt", K)
    return out


def _write_twists(path, stamps, twists):
    with open(path, "w") as fh:
        fh.write("# timestamp tau_x tau_y tau_z omega_x omega_y omega_z (scene motion per frame interval)\n")
        for ts, T in zip(stamps, twists):
            fh.write(ts + " " + " ".join(f"{v:.17g}" for v in T.vector) + "\n")


def read_twists(path):
    stamps, twists = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            vals = [float(v) for v in line.split()]
            stamps.append(vals[0])
            twists.append(CameraVelocity.from_vector(vals[1:7]))
    return np.array(stamps), twists
