"""Weighted least-squares ego-motion from a flow field, and projection onto rigid motion fields."""
from dataclasses import dataclass, asdict

import numpy as np
from scipy import linalg

from .errors import DegenerateGeometryError, InsufficientDataError, ShapeError
from .geometry import (CameraVelocity, FlowField, InverseDepthMap, MotionField,
                       normalized_grid, stacked_Q, synthesize_motion_field)

PARAM_NAMES = ("tau_x", "tau_y", "tau_z", "omega_x", "omega_y", "omega_z")
MIN_SUPPORT = 6
NULL_EIG_RATIO = 1e-12


@dataclass
class EgoFit:
    T: CameraVelocity
    normal_matrix: np.ndarray
    residual_rms: float
    support: int
    condition_estimate: float
    degenerate: bool = False
    iterations: int = 1
    converged: bool = True

    def diagnostics(self):
        return {
            "twist": [float(v) for v in self.T.vector],
            "residual_rms": float(self.residual_rms),
            "support": int(self.support),
            "condition": float(self.condition_estimate),
            "degenerate": bool(self.degenerate),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


@dataclass
class RobustConfig:
    kernel: str = "huber"
    huber_k: float = 1.345
    tukey_c: float = 4.685
    mad_scale: float = 1.4826
    max_iterations: int = 20
    tol: float = 1e-8
    max_condition: float = 1e10
    stride: int = 1

    def __post_init__(self):
        if self.kernel not in ("huber", "tukey"):
            raise ValueError(f"unknown robust kernel {self.kernel!r}")
        if self.max_iterations < 1 or self.stride < 1:
            raise ValueError("max_iterations and stride must be >= 1")

    def as_dict(self):
        return asdict(self)


def _as_motion_field(flow, intrinsics):
    if isinstance(flow, FlowField):
        return flow.to_motion_field(intrinsics)
    if isinstance(flow, MotionField):
        return flow
    raise TypeError(f"expected MotionField or FlowField, got {type(flow).__name__}")


def _effective_weights(rho, field, weights):
    if weights is None:
        w = np.ones(rho.shape)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != rho.shape:
            raise ShapeError(f"weights {w.shape} do not match inverse depth {rho.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("pixel weights must be finite and non-negative")
    return np.where(rho.valid & field.valid, w, 0.0)


def _check_shapes(rho, field, intrinsics):
    if rho.shape != intrinsics.shape:
        raise ShapeError(f"inverse depth {rho.shape} does not match intrinsics {intrinsics.shape}")
    if field.shape != rho.shape:
        raise ShapeError(f"flow {field.shape} does not match inverse depth {rho.shape}")


def _pixel_system(rho, field, w, intrinsics, stride):
    x, y = normalized_grid(intrinsics)
    sl = (slice(None, None, stride), slice(None, None, stride))
    ws = w[sl]
    sel = ws > 0
    Q = stacked_Q(x[sl][sel], y[sl][sel], rho.rho[sl][sel])
    U = field.field[sl][sel]
    return Q, U, ws[sel]


def solve_normal_equations(N, b, max_condition=1e10):
    """Solve the symmetric 6x6 system; returns (solution, condition, degenerate flag)."""
    evals, evecs = np.linalg.eigh(N)
    lmax = evals[-1]
    lmin = evals[0]
    cond = float(lmax / lmin) if lmin > 0 else float("inf")
    if lmax <= 0:
        raise DegenerateGeometryError("normal matrix is zero", condition=cond)
    if max_condition is not None and cond > max_condition:
        null = evecs[:, 0]
        top = np.argsort(-np.abs(null))[:2]
        desc = ", ".join(f"{null[i]:+.3f}*{PARAM_NAMES[i]}" for i in top)
        raise DegenerateGeometryError(
            f"ill-conditioned motion estimate (condition {cond:.3g} > {max_condition:.3g}); "
            f"near-null direction dominated by {desc}",
            condition=cond, null_direction=null)
    if lmin < NULL_EIG_RATIO * lmax:
        keep = evals >= NULL_EIG_RATIO * lmax
        sol = evecs[:, keep] @ ((evecs[:, keep].T @ b) / evals[keep])
        return sol, cond, True
    try:
        sol = linalg.cho_solve(linalg.cho_factor(N, lower=True, check_finite=False), b, check_finite=False)
    except linalg.LinAlgError:
        sol = evecs @ ((evecs.T @ b) / evals)
    return sol, cond, False


def fit_egomotion(rho: InverseDepthMap, flow, weights, intrinsics, max_condition=1e10, stride=1) -> EgoFit:
    """Weighted least-squares twist ``argmin sum_i w_i |v_i - Q_i T|^2``.

    ``flow`` is a :class:`MotionField` or a pixel-unit :class:`FlowField`;
    ``weights`` may be ``None`` for uniform weights on valid pixels.
    """
    field = _as_motion_field(flow, intrinsics)
    _check_shapes(rho, field, intrinsics)
    w = _effective_weights(rho, field, weights)
    Q, U, ws = _pixel_system(rho, field, w, intrinsics, stride)
    return _solve_system(Q, U, ws, max_condition)


def _solve_system(Q, U, ws, max_condition):
    keep = ws > 0
    if not keep.all():
        Q, U, ws = Q[keep], U[keep], ws[keep]
    support = len(ws)
    if support < MIN_SUPPORT:
        raise InsufficientDataError(f"need at least {MIN_SUPPORT} weighted pixels with valid depth, got {support}")
    M = Q.reshape(-1, 6)
    Mw = (Q * ws[:, None, None]).reshape(-1, 6)
    N = Mw.T @ M
    N = 0.5 * (N + N.T)
    b = Mw.T @ U.reshape(-1)
    sol, cond, degenerate = solve_normal_equations(N, b, max_condition)
    r = U - (M @ sol).reshape(-1, 2)
    rms = float(np.sqrt(np.sum(ws * np.sum(r * r, axis=1)) / np.sum(ws)))
    return EgoFit(CameraVelocity.from_vector(sol), N, rms, support, cond, degenerate)


def project_flow(rho, flow, weights, intrinsics, max_condition=1e10, stride=1):
    """Fit a twist and resynthesize its motion field: the projection of ``flow`` onto rigid fields."""
    fit = fit_egomotion(rho, flow, weights, intrinsics, max_condition=max_condition, stride=stride)
    return fit, synthesize_motion_field(rho, fit.T, intrinsics)


def residual_field(rho, flow, T, intrinsics):
    """Per-pixel residual vectors ``v(x) - Q(x) T`` (zero where invalid)."""
    field = _as_motion_field(flow, intrinsics)
    model = synthesize_motion_field(rho, T, intrinsics)
    r = field.field - model.field
    valid = field.valid & rho.valid
    r[~valid] = 0.0
    return r, valid


def robust_scale(residuals, mad_scale=1.4826):
    """MAD scale estimate from residual vectors of shape (n, 2)."""
    comps = np.asarray(residuals, dtype=float).reshape(-1)
    return mad_scale * float(np.median(np.abs(comps - np.median(comps))))


def kernel_weights(norms, scale, config):
    """Robust weights from residual norms; non-increasing in the norm."""
    norms = np.asarray(norms, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        e = np.where(norms == 0, 0.0, norms / scale)
    if config.kernel == "huber":
        k = config.huber_k
        with np.errstate(divide="ignore"):
            return np.where(e <= k, 1.0, k / e)
    c = config.tukey_c
    return np.where(e < c, (1.0 - (e / c) ** 2) ** 2, 0.0)


def robust_weights(residuals, config, floor=0.0):
    residuals = np.asarray(residuals, dtype=float)
    scale = max(robust_scale(residuals, config.mad_scale), floor)
    return kernel_weights(np.linalg.norm(residuals, axis=-1), scale, config), scale


def irls_fit(rho, flow, intrinsics, config=None, weights=None):
    """Iteratively reweighted least squares; returns ``(fit, weights)``.

    Weights are re-estimated each iteration from the residual norms scaled by
    1.4826 * MAD, and the loop stops once the twist changes by less than
    ``config.tol``.  A fit that does not settle within ``max_iterations`` is
    returned with ``converged=False``.
    """
    config = config or RobustConfig()
    field = _as_motion_field(flow, intrinsics)
    _check_shapes(rho, field, intrinsics)
    base = _effective_weights(rho, field, weights)
    support_mask = base > 0
    # Keeps the scale finite when the data are fit exactly.
    mag = np.sqrt(np.mean(np.sum(field.field[support_mask] ** 2, axis=1))) if support_mask.any() else 0.0
    floor = np.finfo(float).eps * max(mag, np.finfo(float).tiny)

    # the pixel system is fixed; only the weights change between iterations
    x, y = normalized_grid(intrinsics)
    Q = stacked_Q(x[support_mask], y[support_mask], rho.rho[support_mask])
    U = field.field[support_mask]
    M = Q.reshape(-1, 6)
    on_grid = np.zeros(rho.shape, dtype=bool)
    on_grid[::config.stride, ::config.stride] = True
    sub = on_grid[support_mask]
    b0 = base[support_mask]
    if sub.all():
        sub = slice(None)

    w = base
    fit = _solve_system(Q[sub], U[sub], b0[sub], config.max_condition)
    converged = False
    it = 1
    while it < config.max_iterations:
        r = U - (M @ fit.T.vector).reshape(-1, 2)
        rw, _ = robust_weights(r, config, floor)
        wv = b0 * rw
        new = _solve_system(Q[sub], U[sub], wv[sub], config.max_condition)
        it += 1
        step = np.linalg.norm(new.T.vector - fit.T.vector)
        fit = new
        if step < config.tol:
            converged = True
            break
    if it > 1:
        w = np.zeros_like(base)
        w[support_mask] = wv
    fit.iterations = it
    fit.converged = converged
    return fit, w
