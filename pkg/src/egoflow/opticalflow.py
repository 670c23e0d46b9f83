"""Coarse-to-fine Horn-Schunck optical flow with incremental warping."""
from dataclasses import dataclass, asdict

import cv2
import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .flowwarp import bilinear_sample, to_gray
from .geometry import FlowField

MIN_SIZE = 16

_DERIV = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_AVG = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=float) / 12.0


@dataclass
class FlowConfig:
    levels: int = 4
    scale: float = 0.5
    iterations: int = 100
    alpha: float = 15.0
    warps: int = 3
    median: int = 5
    intensity_range: float = 255.0

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1 or self.warps < 1:
            raise ConfigError("levels, iterations and warps must be >= 1")
        if not 0 < self.scale < 1:
            raise ConfigError(f"pyramid scale must be in (0, 1), got {self.scale}")

    def as_dict(self):
        return asdict(self)


def _downsample(img, shape, scale):
    sigma = np.sqrt(1.0 / scale ** 2 - 1.0) / 2.0
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
    h, w = img.shape
    ys = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    xs = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    return bilinear_sample(smooth, *np.meshgrid(xs, ys))


def _resize_flow(flow, shape):
    h, w = flow.shape[:2]
    ys = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    xs = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    out = bilinear_sample(flow, *np.meshgrid(xs, ys))
    out[..., 0] *= shape[1] / w
    out[..., 1] *= shape[0] / h
    return out


def _pyramid_shapes(shape, config):
    shapes = [shape]
    for _ in range(config.levels - 1):
        nxt = (int(round(shapes[-1][0] * config.scale)), int(round(shapes[-1][1] * config.scale)))
        if min(nxt) < MIN_SIZE:
            break
        shapes.append(nxt)
    return shapes


def _neighbour_average(f):
    # edge-replicated 8-neighbour Horn-Schunck average
    return cv2.filter2D(f, -1, _AVG, borderType=cv2.BORDER_REPLICATE)


def _median(f, size):
    if size in (3, 5):
        # float32 is the only float type cv2 supports here; the median picks a value so only rounding is lost
        return cv2.medianBlur(f.astype(np.float32), size)
    return ndimage.median_filter(f, size=size, mode="nearest")


def _horn_schunck(i1, i2, flow, config):
    h, w = i1.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    alpha2 = config.alpha ** 2
    u, v = flow[..., 0].copy(), flow[..., 1].copy()
    for _ in range(config.warps):
        u0, v0 = u.copy(), v.copy()
        i2w = bilinear_sample(i2, gx + u0, gy + v0)
        avg = 0.5 * (i1 + i2w)
        Ix = ndimage.correlate1d(avg, _DERIV, axis=1, mode="nearest")
        Iy = ndimage.correlate1d(avg, _DERIV, axis=0, mode="nearest")
        It = i2w - i1
        c = It - Ix * u0 - Iy * v0
        denom = alpha2 + Ix * Ix + Iy * Iy
        # the fixed-point iterations run in single precision, which is ample for sub-pixel flow
        f32 = np.float32
        Ix, Iy, c = Ix.astype(f32), Iy.astype(f32), c.astype(f32)
        kx, ky = (Ix / denom).astype(f32), (Iy / denom).astype(f32)
        u, v = u.astype(f32), v.astype(f32)
        r = np.empty_like(c)
        t = np.empty_like(c)
        for _ in range(config.iterations):
            u = _neighbour_average(u)
            v = _neighbour_average(v)
            np.multiply(Ix, u, out=r)
            np.multiply(Iy, v, out=t)
            r += t
            r += c
            u -= np.multiply(kx, r, out=t)
            v -= np.multiply(ky, r, out=t)
        if config.median > 1:
            u, v = _median(u, config.median), _median(v, config.median)
        u, v = u.astype(float), v.astype(float)
    return np.stack([u, v], axis=-1)


def compute_flow(i_t, i_next, config=None) -> FlowField:
    """Dense flow such that ``i_next(x + flow(x))`` matches ``i_t(x)``."""
    config = config or FlowConfig()
    a = to_gray(i_t) * config.intensity_range
    b = to_gray(i_next) * config.intensity_range
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < MIN_SIZE:
        raise ConfigError(f"images must be at least {MIN_SIZE} px on each side, got {a.shape}")
    shapes = _pyramid_shapes(a.shape, config)
    pyr_a, pyr_b = [a], [b]
    for shape in shapes[1:]:
        pyr_a.append(_downsample(pyr_a[-1], shape, config.scale))
        pyr_b.append(_downsample(pyr_b[-1], shape, config.scale))
    flow = np.zeros(shapes[-1] + (2,))
    for level in range(len(shapes) - 1, -1, -1):
        if flow.shape[:2] != shapes[level]:
            flow = _resize_flow(flow, shapes[level])
        flow = _horn_schunck(pyr_a[level], pyr_b[level], flow, config)
    return FlowField(flow, np.ones(a.shape, dtype=bool))
