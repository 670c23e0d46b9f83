import numpy as np
import pytest

from egoflow.egomotion import project_flow
from egoflow.errors import InsufficientDataError
from egoflow.flowwarp import (DEFAULT_LAMBDAS, LossReport, compute_losses, loss_mf, loss_of, loss_op, to_gray,
                              warp_gradient, warp_image)
from egoflow.geometry import FlowField, InverseDepthMap, MotionField, normalized_grid, stacked_Q
from egoflow.synth import SceneConfig, make_scene, render_pair, scene_motion_field


def smooth_image(rng, h=40, w=50, n=6):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    img = np.full((h, w), 0.5)
    for _ in range(n):
        k = rng.uniform(0.05, 0.25, 2) * rng.choice([-1, 1], 2)
        img += rng.uniform(0.02, 0.08) * np.sin(k[0] * u + k[1] * v + rng.uniform(0, 6))
    return img


def brute_warp(src, flow):
    h, w = src.shape
    out = np.zeros((h, w))
    valid = np.zeros((h, w), bool)
    for v in range(h):
        for u in range(w):
            X, Y = u + flow[v, u, 0], v + flow[v, u, 1]
            if not (0 <= X <= w - 1 and 0 <= Y <= h - 1):
                continue
            x0, y0 = min(int(np.floor(X)), w - 2), min(int(np.floor(Y)), h - 2)
            a, b = X - x0, Y - y0
            out[v, u] = ((1 - a) * (1 - b) * src[y0, x0] + a * (1 - b) * src[y0, x0 + 1]
                         + (1 - a) * b * src[y0 + 1, x0] + a * b * src[y0 + 1, x0 + 1])
            valid[v, u] = True
    return out, valid


def test_to_gray():
    rgb = np.zeros((2, 2, 3))
    rgb[..., 0] = 1
    np.testing.assert_allclose(to_gray(rgb), 0.299)
    np.testing.assert_allclose(to_gray(np.ones((2, 2, 3))), 1.0)


def test_zero_flow_identity(rng):
    img = rng.random((20, 30))
    out, valid = warp_image(img, np.zeros((20, 30, 2)))
    np.testing.assert_array_equal(out, img)
    assert valid.all()


def test_integer_shift(rng):
    src = rng.random((20, 30))
    target = np.zeros_like(src)
    target[:, :-2] = src[:, 2:]            # target(x) = src(x + 2)
    out, valid = warp_image(src, np.broadcast_to([2.0, 0.0], (20, 30, 2)))
    assert not valid[:, -2:].any() and valid[:, :-2].all()
    np.testing.assert_array_equal(out[valid], target[valid])


def test_exact_on_affine_images(rng):
    v, u = np.mgrid[0:25, 0:35].astype(float)
    img = 0.1 + 0.01 * u - 0.004 * v
    out, valid = warp_image(img, np.broadcast_to([0.5, 0.0], (25, 35, 2)))
    np.testing.assert_allclose(out[valid], (0.1 + 0.01 * (u + 0.5) - 0.004 * v)[valid], atol=1e-15)
    flow = rng.uniform(-3, 3, (25, 35, 2))
    out, valid = warp_image(img, flow)
    expect = 0.1 + 0.01 * (u + flow[..., 0]) - 0.004 * (v + flow[..., 1])
    np.testing.assert_allclose(out[valid], expect[valid], atol=1e-14)


def test_warp_matches_brute_force(rng):
    src = rng.random((12, 15))
    flow = rng.uniform(-4, 4, (12, 15, 2))
    out, valid = warp_image(src, flow)
    ref, rvalid = brute_warp(src, flow)
    np.testing.assert_array_equal(valid, rvalid)
    np.testing.assert_allclose(out[valid], ref[valid], atol=1e-14)


def test_out_of_range_invalid():
    out, valid = warp_image(np.ones((5, 5)), np.broadcast_to([10.0, 0.0], (5, 5, 2)))
    assert not valid.any()


def total_l1(src, tgt, flow):
    w, valid = warp_image(src, flow)
    return np.sum(np.abs(tgt - w)[valid])


def test_gradient_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(5):
        src = smooth_image(rng)
        tgt = smooth_image(rng)
        flow = rng.uniform(-0.9, 0.9, src.shape + (2,))
        g = warp_gradient(src, flow, tgt)
        h = 1e-5
        inner = np.zeros(src.shape, bool)
        inner[2:-2, 2:-2] = True
        # stay away from bilinear cell boundaries and L1 kinks
        frac = np.abs(((flow + 0.5) % 1.0) - 0.5)
        inner &= np.all(frac > 1e-3, axis=-1)
        w, _ = warp_image(src, flow)
        inner &= np.abs(tgt - w) > 1e-3
        for c in range(2):
            d = np.zeros_like(flow)
            d[..., c] = h
            # each term depends on its own flow vector only, so one perturbation probes all pixels
            fp = np.abs(tgt - warp_image(src, flow + d)[0])
            fm = np.abs(tgt - warp_image(src, flow - d)[0])
            num = (fp - fm) / (2 * h)
            worst = max(worst, np.abs(num - g.flow[..., c])[inner].max())
    assert worst < 1e-4


def test_gradient_scalar_loss_fd(rng):
    src = smooth_image(rng, 12, 14)
    tgt = smooth_image(rng, 12, 14)
    flow = rng.uniform(-0.4, 0.4, (12, 14, 2))
    g = warp_gradient(src, flow, tgt).flow
    for (v, u, c) in [(5, 6, 0), (3, 9, 1), (8, 2, 0)]:
        d = np.zeros_like(flow)
        d[v, u, c] = 1e-5
        num = (total_l1(src, tgt, flow + d) - total_l1(src, tgt, flow - d)) / 2e-5
        assert abs(num - g[v, u, c]) < 1e-4


def test_gradient_trivial_cases(rng):
    flow = rng.uniform(-1, 1, (10, 12, 2))
    g = warp_gradient(np.full((10, 12), 0.3), flow, rng.random((10, 12)))
    assert np.all(g.flow == 0)
    src = smooth_image(rng, 10, 12)
    tgt, _ = warp_image(src, flow)
    g = warp_gradient(src, flow, tgt)
    assert np.all(g.flow == 0)


def test_loss_of_examples(rng):
    img = rng.random((16, 16))
    assert loss_of(img, img, np.zeros((16, 16, 2))) == 0
    assert loss_of(img + 0.125, img, np.zeros((16, 16, 2))) == pytest.approx(0.125, abs=1e-15)
    flow = rng.uniform(-2, 2, (16, 16, 2))
    other = rng.random((16, 16))
    ref, valid = brute_warp(other, flow)
    assert loss_of(img, other, flow) == pytest.approx(np.abs(img - ref)[valid].mean(), rel=1e-12)
    with pytest.raises(InsufficientDataError):
        loss_of(img, img, np.full((16, 16, 2), 50.0))


def test_loss_mf_masks_depth(rng):
    sc = make_scene(SceneConfig(), 0)
    pair, gt = render_pair(sc)
    mf = scene_motion_field(sc)
    assert loss_mf(pair.i_t, pair.i_next, mf, sc.depth.valid, sc.intrinsics) < 0.01
    with pytest.raises(InsufficientDataError):
        loss_mf(pair.i_t, pair.i_next, mf, np.zeros(sc.depth.shape, bool), sc.intrinsics)
    with pytest.raises(ValueError):
        loss_mf(pair.i_t, pair.i_next, mf, sc.depth.valid)


def test_projection_does_not_hurt_photometric_loss(rng):
    sc = make_scene(SceneConfig(), 4)
    pair, gt = render_pair(sc)
    K = sc.intrinsics
    noisy = FlowField(gt.flow + 0.3 * rng.standard_normal(gt.flow.shape), gt.valid)
    _, proj = project_flow(sc.depth, noisy, None, K)
    assert loss_mf(pair.i_t, pair.i_next, proj, sc.depth.valid, K) <= loss_of(pair.i_t, pair.i_next, noisy) + 1e-6


def test_loss_op_examples(rng):
    sc = make_scene(SceneConfig(), 2)
    K = sc.intrinsics
    mf = scene_motion_field(sc)
    flow = mf.to_pixel_flow(K)
    assert loss_op(flow, mf, K) == 0
    # orthogonal perturbation (in normalized units) leaves the projection unchanged
    x, y = normalized_grid(K)
    cols = stacked_Q(x, y, sc.depth.rho).reshape(-1, 6)
    q, _ = np.linalg.qr(cols)
    p = rng.standard_normal(cols.shape[0])
    p = 1e-3 * (p - q @ (q.T @ p))
    pert = MotionField(mf.field + p.reshape(mf.field.shape), mf.valid)
    _, proj = project_flow(sc.depth, pert, None, K)
    pflow = pert.to_pixel_flow(K)
    expect = np.mean(np.sum(np.abs(p.reshape(mf.field.shape) * [K.fx, K.fy]), axis=-1))
    assert loss_op(pflow, proj, K) == pytest.approx(expect, abs=1e-9)
    # brute force
    a = rng.standard_normal(flow.flow.shape)
    b = rng.standard_normal(flow.flow.shape)
    ref = np.mean(np.abs(a - b).sum(-1))
    assert loss_op(FlowField(a), FlowField(b)) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(InsufficientDataError):
        loss_op(FlowField(a, np.zeros(a.shape[:2], bool)), FlowField(b))


def test_loss_report_composition(rng):
    for _ in range(200):
        vals = rng.random(3)
        lam = rng.random(3)
        r = LossReport.combine(*vals, lambdas=lam)
        assert r.consistent()
        assert r.l_final == lam[0] * vals[0] + lam[1] * vals[1] + lam[2] * vals[2]
    r = LossReport.combine(0.3, 0.2, 0.1)
    assert (r.lambda_of, r.lambda_mf, r.lambda_op) == DEFAULT_LAMBDAS == (1.0, 0.1, 0.1)


def test_compute_losses_on_synth():
    sc = make_scene(SceneConfig(), 6)
    pair, gt = render_pair(sc)
    mf = scene_motion_field(sc)
    r = compute_losses(pair.i_t, pair.i_next, gt, mf, sc.depth.valid, sc.intrinsics)
    assert r.consistent()
    assert r.l_op < 1e-12
    assert r.l_of == pytest.approx(r.l_mf, abs=1e-12)
