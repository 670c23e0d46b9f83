"""Static / dynamic two-layer decomposition by alternating hard assignment."""
from dataclasses import dataclass, field, asdict, replace

import cv2
import numpy as np

from .egomotion import (RobustConfig, _as_motion_field, fit_egomotion, irls_fit,
                        residual_field, robust_scale)
from .errors import InsufficientDataError
from .geometry import MotionField, synthesize_motion_field

POLICIES = ("larger-support", "smaller-motion")


@dataclass
class SegmentationMask:
    """Hard labels: ``static`` is True for background pixels; only ``valid`` pixels carry a label."""
    static: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        self.static = np.asarray(self.static, dtype=bool) & self.valid

    @property
    def dynamic(self):
        return self.valid & ~self.static

    @property
    def n_static(self):
        return int(np.count_nonzero(self.static))

    @property
    def n_dynamic(self):
        return int(np.count_nonzero(self.dynamic))

    def to_image(self):
        """8-bit image: 255 static, 0 dynamic, 128 for pixels without a label."""
        img = np.full(self.valid.shape, 128, dtype=np.uint8)
        img[self.static] = 255
        img[self.dynamic] = 0
        return img

    def save(self, path):
        if not cv2.imwrite(str(path), self.to_image()):
            raise OSError(f"cannot write {path}")


@dataclass
class LayerConfig:
    max_iterations: int = 10
    margin: float = 0.0
    min_dynamic_support: int = 50
    init_threshold: float = 3.0
    merge_threshold: float = 3.0
    residual_floor: float = 1e-6
    robust: RobustConfig = field(default_factory=RobustConfig)

    def as_dict(self):
        return asdict(self)


@dataclass
class SymmetryPolicy:
    kind: str = "larger-support"
    length_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown symmetry policy {self.kind!r}; expected one of {POLICIES}")


@dataclass
class LayeredFit:
    static_fit: object
    dynamic_fit: object
    mask: SegmentationMask
    composite_field: MotionField
    iterations: int
    converged: bool
    single_layer: bool = False
    objective: list = field(default_factory=list)
    swapped: bool = False

    def diagnostics(self):
        return {
            "static": self.static_fit.diagnostics(),
            "dynamic": None if self.dynamic_fit is None else self.dynamic_fit.diagnostics(),
            "n_static": self.mask.n_static,
            "n_dynamic": self.mask.n_dynamic,
            "iterations": self.iterations,
            "converged": self.converged,
            "single_layer": self.single_layer,
            "swapped": self.swapped,
        }


def composite_motion_field(rho, mask, T_static, T_dynamic, intrinsics):
    ms = synthesize_motion_field(rho, T_static, intrinsics)
    if T_dynamic is None:
        field = np.where(mask.static[..., None], ms.field, 0.0)
    else:
        md = synthesize_motion_field(rho, T_dynamic, intrinsics)
        field = np.where(mask.static[..., None], ms.field, np.where(mask.dynamic[..., None], md.field, 0.0))
    return MotionField(field, mask.valid.copy())


def _sq_residual(rho, field, T, intrinsics):
    r, _ = residual_field(rho, field, T, intrinsics)
    return np.sum(r * r, axis=-1)


def _single_layer(rho, field, valid, intrinsics, config, iterations=1):
    fit = fit_egomotion(rho, field, valid.astype(float), intrinsics,
                        config.robust.max_condition, config.robust.stride)
    mask = SegmentationMask(valid, valid)
    res = _sq_residual(rho, field, fit.T, intrinsics)
    return LayeredFit(fit, None, mask, composite_motion_field(rho, mask, fit.T, None, intrinsics),
                      iterations, True, single_layer=True, objective=[float(res[valid].sum())])


def fit_two_layers(rho, flow, intrinsics, config=None) -> LayeredFit:
    """Split pixels between a static and a dynamic rigid motion.

    Starts from a robust fit on all pixels, moves pixels whose residual exceeds
    ``init_threshold`` robust scales to the dynamic layer, then alternates
    per-layer least-squares fits with reassignment to the layer of smaller
    residual until the mask stops changing.  When the dynamic layer is too
    small, or indistinguishable from the background, the result is a single
    all-static layer with ``single_layer=True``.
    """
    config = config or LayerConfig()
    field = _as_motion_field(flow, intrinsics)
    valid = rho.valid & field.valid
    if np.count_nonzero(valid) < 6:
        raise InsufficientDataError("scene has no estimable background (fewer than 6 valid pixels)")

    fit0, _ = irls_fit(rho, field, intrinsics, config.robust)
    r0, _ = residual_field(rho, field, fit0.T, intrinsics)
    scale = robust_scale(r0[valid], config.robust.mad_scale)
    mag = np.sqrt(np.mean(np.sum(field.field[valid] ** 2, axis=1)))
    scale = max(scale, config.residual_floor * mag, np.finfo(float).tiny)
    dyn = valid & (np.linalg.norm(r0, axis=-1) > config.init_threshold * scale)

    objective = []
    converged = False
    it = 0
    fit_s = fit_d = None
    while it < config.max_iterations:
        if np.count_nonzero(dyn) < config.min_dynamic_support:
            return _single_layer(rho, field, valid, intrinsics, config, max(it, 1))
        stat = valid & ~dyn
        if np.count_nonzero(stat) < 6:
            raise InsufficientDataError("static layer has fewer than 6 pixels")
        it += 1
        fit_s = fit_egomotion(rho, field, stat.astype(float), intrinsics,
                              config.robust.max_condition, config.robust.stride)
        fit_d = fit_egomotion(rho, field, dyn.astype(float), intrinsics,
                              config.robust.max_condition, config.robust.stride)
        rs = _sq_residual(rho, field, fit_s.T, intrinsics)
        rd = _sq_residual(rho, field, fit_d.T, intrinsics)
        new_dyn = valid & np.where(dyn, rd <= rs + config.margin, rd + config.margin < rs)
        objective.append(float(np.sum(np.where(new_dyn, rd, rs)[valid])))
        if np.array_equal(new_dyn, dyn):
            converged = True
            break
        dyn = new_dyn

    if not converged:
        if np.count_nonzero(dyn) < config.min_dynamic_support:
            return _single_layer(rho, field, valid, intrinsics, config, it)
        stat = valid & ~dyn
        fit_s = fit_egomotion(rho, field, stat.astype(float), intrinsics,
                              config.robust.max_condition, config.robust.stride)
        fit_d = fit_egomotion(rho, field, dyn.astype(float), intrinsics,
                              config.robust.max_condition, config.robust.stride)

    ms = synthesize_motion_field(rho, fit_s.T, intrinsics)
    md = synthesize_motion_field(rho, fit_d.T, intrinsics)
    # Noise level of the final assignment; the initial scale is inflated when IRLS starts badly.
    r = np.where(dyn[..., None], field.field - md.field, field.field - ms.field)
    final_scale = max(robust_scale(r[valid], config.robust.mad_scale), config.residual_floor * mag,
                      np.finfo(float).tiny)
    sep = np.sqrt(np.mean(np.sum((ms.field[dyn] - md.field[dyn]) ** 2, axis=1)))
    if sep < config.merge_threshold * final_scale:
        return _single_layer(rho, field, valid, intrinsics, config, it)

    mask = SegmentationMask(valid & ~dyn, valid)
    fit_s.iterations = fit_d.iterations = it
    return LayeredFit(fit_s, fit_d, mask, composite_motion_field(rho, mask, fit_s.T, fit_d.T, intrinsics),
                      it, converged, objective=objective)


def _motion_size(fit, length_scale):
    T = fit.T
    return float(T.tau @ T.tau + (length_scale ** 2) * (T.omega @ T.omega))


def resolve_static_layer(fit: LayeredFit, policy=None) -> LayeredFit:
    """Relabel the layers so that the policy's choice is static.

    Ties are broken by the first valid pixel in row-major order: its layer is static.
    """
    policy = policy or SymmetryPolicy()
    if isinstance(policy, str):
        policy = SymmetryPolicy(policy)
    if fit.dynamic_fit is None:
        return fit
    mask = fit.mask
    if policy.kind == "larger-support":
        a, b = mask.n_static, mask.n_dynamic
        keep = a > b if a != b else None
    else:
        a = _motion_size(fit.static_fit, policy.length_scale)
        b = _motion_size(fit.dynamic_fit, policy.length_scale)
        keep = a < b if a != b else None
    if keep is None:
        first = np.flatnonzero(mask.valid.ravel())[0]
        keep = bool(mask.static.ravel()[first])
    if keep:
        return fit
    new_mask = SegmentationMask(mask.dynamic, mask.valid)
    return replace(fit, static_fit=fit.dynamic_fit, dynamic_fit=fit.static_fit, mask=new_mask,
                   swapped=not fit.swapped)
