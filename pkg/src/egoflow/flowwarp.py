"""Bilinear warping, its analytic flow gradient, and the photometric / projection losses."""
from dataclasses import dataclass, asdict

import numpy as np

from .errors import InsufficientDataError, ShapeError
from .geometry import FlowField, MotionField

DEFAULT_LAMBDAS = (1.0, 0.1, 0.1)


def to_gray(image):
    """Rec. 601 luma for (H, W, 3) images; 2-D images pass through."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    raise ShapeError(f"expected (H, W) or (H, W, 3) image, got {image.shape}")


def _flow_array(flow):
    if isinstance(flow, FlowField):
        return flow.flow, flow.valid
    flow = np.asarray(flow, dtype=float)
    return flow, np.all(np.isfinite(flow), axis=-1)


def _sample_coords(shape, flow):
    h, w = shape
    X = np.arange(w, dtype=float)[None, :] + flow[..., 0]
    Y = np.arange(h, dtype=float)[:, None] + flow[..., 1]
    return X, Y


def _bilinear_setup(shape, X, Y):
    h, w = shape
    Xc = np.clip(np.nan_to_num(X), 0, w - 1)
    Yc = np.clip(np.nan_to_num(Y), 0, h - 1)
    x0 = np.minimum(np.floor(Xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(Yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, y0, x1, y1, Xc - x0, Yc - y0


def bilinear_sample(image, X, Y):
    """Sample ``image`` at real coordinates, clamping to the border."""
    image = np.asarray(image, dtype=float)
    x0, y0, x1, y1, a, b = _bilinear_setup(image.shape[:2], X, Y)
    if image.ndim == 3:
        a = a[..., None]
        b = b[..., None]
    return ((1 - a) * (1 - b) * image[y0, x0] + a * (1 - b) * image[y0, x1]
            + (1 - a) * b * image[y1, x0] + a * b * image[y1, x1])


def warp_image(source, flow):
    """Sample ``source`` at ``x + flow(x)``; returns ``(warped, valid)``.

    Samples that land outside the image are marked invalid instead of clamped.
    """
    source = np.asarray(source, dtype=float)
    f, fvalid = _flow_array(flow)
    if f.shape[:2] != source.shape[:2]:
        raise ShapeError(f"flow {f.shape[:2]} does not match image {source.shape[:2]}")
    h, w = source.shape[:2]
    X, Y = _sample_coords((h, w), f)
    valid = fvalid & (X >= 0) & (X <= w - 1) & (Y >= 0) & (Y <= h - 1)
    warped = bilinear_sample(source, X, Y)
    return warped, valid


def warp_gradient(source, flow, target):
    """Gradient of ``sum_x |target(x) - W(source, flow)(x)|`` with respect to each flow vector.

    Each pixel's term only depends on its own flow vector, so the result is a
    per-pixel field. Divide by the valid-pixel count for the mean loss.
    """
    source = to_gray(source)
    target = to_gray(target)
    f, fvalid = _flow_array(flow)
    h, w = source.shape
    X, Y = _sample_coords((h, w), f)
    valid = fvalid & (X >= 0) & (X <= w - 1) & (Y >= 0) & (Y <= h - 1)
    x0, y0, x1, y1, a, b = _bilinear_setup((h, w), X, Y)
    i00, i10 = source[y0, x0], source[y0, x1]
    i01, i11 = source[y1, x0], source[y1, x1]
    warped = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    d_dx = (1 - b) * (i10 - i00) + b * (i11 - i01)
    d_dy = (1 - a) * (i01 - i00) + a * (i11 - i10)
    s = -np.sign(target - warped)
    grad = np.stack([s * d_dx, s * d_dy], axis=-1)
    grad[~valid] = 0.0
    return FlowField(grad, valid)


def _mean_l1(diff, mask, what):
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise InsufficientDataError(f"{what}: no valid pixels to evaluate")
    return float(np.sum(np.abs(diff[mask])) / n)


def loss_of(i_t, i_next, flow):
    """Mean L1 photometric error between ``i_t`` and ``i_next`` warped by ``flow``."""
    i_t = to_gray(i_t)
    warped, valid = warp_image(to_gray(i_next), flow)
    return _mean_l1(i_t - warped, valid, "photometric flow loss")


def loss_mf(i_t, i_next, motion_field, rho_validity, intrinsics=None):
    """Photometric error of the motion-field warp, restricted to pixels with valid depth.

    ``motion_field`` may be a normalized-unit :class:`MotionField` (requires
    ``intrinsics``) or a pixel-unit :class:`FlowField`.
    """
    if isinstance(motion_field, MotionField):
        if intrinsics is None:
            raise ValueError("intrinsics are required to convert a MotionField to pixel flow")
        motion_field = motion_field.to_pixel_flow(intrinsics)
    i_t = to_gray(i_t)
    warped, valid = warp_image(to_gray(i_next), motion_field)
    mask = valid & np.asarray(rho_validity, dtype=bool)
    return _mean_l1(i_t - warped, mask, "motion-field loss")


def loss_op(flow, motion_field, intrinsics=None):
    """Mean per-pixel L1 distance between a flow and its projection (pixel units)."""
    if isinstance(motion_field, MotionField):
        if intrinsics is None:
            raise ValueError("intrinsics are required to convert a MotionField to pixel flow")
        motion_field = motion_field.to_pixel_flow(intrinsics)
    f, fvalid = _flow_array(flow)
    m, mvalid = _flow_array(motion_field)
    mask = fvalid & mvalid
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise InsufficientDataError("projection loss: no jointly valid pixels")
    return float(np.sum(np.abs(f[mask] - m[mask])) / n)


@dataclass
class LossReport:
    l_of: float
    l_mf: float
    l_op: float
    l_final: float
    lambda_of: float = DEFAULT_LAMBDAS[0]
    lambda_mf: float = DEFAULT_LAMBDAS[1]
    lambda_op: float = DEFAULT_LAMBDAS[2]

    @classmethod
    def combine(cls, l_of, l_mf, l_op, lambdas=DEFAULT_LAMBDAS):
        lo, lm, lp = (float(v) for v in lambdas)
        return cls(l_of, l_mf, l_op, lo * l_of + lm * l_mf + lp * l_op, lo, lm, lp)

    def consistent(self):
        return self.l_final == self.lambda_of * self.l_of + self.lambda_mf * self.l_mf + self.lambda_op * self.l_op

    def as_dict(self):
        return asdict(self)


def compute_losses(i_t, i_next, flow, motion_field, rho_validity, intrinsics, lambdas=DEFAULT_LAMBDAS):
    mf_pix = motion_field.to_pixel_flow(intrinsics) if isinstance(motion_field, MotionField) else motion_field
    return LossReport.combine(
        loss_of(i_t, i_next, flow),
        loss_mf(i_t, i_next, mf_pix, rho_validity),
        loss_op(flow, mf_pix),
        lambdas,
    )
