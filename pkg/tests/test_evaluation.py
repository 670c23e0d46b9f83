import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egoflow.dataio import Trajectory
from egoflow.errors import InsufficientDataError, OrderError
from egoflow.evaluation import (PairError, Stats, align_rigid, ate_snippets, integrate_trajectory,
                                relative_errors, relative_pose_error, summarize)
from egoflow.geometry import CameraVelocity, Pose, pose_compose, pose_inverse, pose_to_twist, rodrigues

from conftest import random_twist


def random_pose(rng, rot=1.0, trans=1.0):
    return Pose(rodrigues(rng.standard_normal(3) * rot), rng.standard_normal(3) * trans)


def random_axis(rng):
    a = rng.standard_normal(3)
    return a / np.linalg.norm(a)


def test_rpe_examples():
    e = relative_pose_error(Pose.identity(), Pose.identity())
    assert e.trans_error == 0 and e.rot_error == 0
    e = relative_pose_error(Pose.identity(), Pose(np.eye(3), [3.0, 4.0, 0.0]))
    assert e.trans_error == pytest.approx(5.0) and e.rot_error == 0
    e = relative_pose_error(Pose.identity(), Pose(rodrigues([0, 0, np.pi / 2]), [0, 0, 0]))
    assert e.rot_error == pytest.approx(np.pi / 2, abs=1e-15)


def test_rpe_trace_identity(rng):
    worst = 0.0
    for _ in range(1000):
        theta = rng.uniform(0, np.pi)
        P = random_pose(rng)
        gt = pose_compose(P, Pose(rodrigues(theta * random_axis(rng)), [0, 0, 0]))
        worst = max(worst, abs(relative_pose_error(P, gt).rot_error - theta))
    assert worst < 1e-12


def test_rpe_rotation_sign_and_left_invariance(rng):
    for _ in range(50):
        a, b, g = random_pose(rng), random_pose(rng), random_pose(rng)
        e1 = relative_pose_error(a, b)
        e2 = relative_pose_error(pose_compose(g, a), pose_compose(g, b))
        assert e1.rot_error == pytest.approx(e2.rot_error, abs=1e-7)
        assert e1.trans_error == pytest.approx(e2.trans_error, rel=1e-9, abs=1e-12)
        e3 = relative_pose_error(b, a)
        assert e1.rot_error == pytest.approx(e3.rot_error, abs=1e-7)


def test_summarize():
    pairs = [PairError(t, r) for t, r in [(1.0, 0.1), (2.0, 0.2), (4.0, 0.3)]]
    s = summarize(pairs)
    assert s.count == 3
    assert s.translation.mean == pytest.approx(7 / 3)
    assert s.translation.median == 2.0
    assert s.translation.rmse ** 2 == pytest.approx(7.0)
    assert s.rotation.std == pytest.approx(np.std([0.1, 0.2, 0.3]))
    assert set(s.as_dict()) == {"translation", "rotation"}
    with pytest.raises(InsufficientDataError):
        summarize([])
    with pytest.raises(InsufficientDataError):
        Stats.of([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=40))
def test_rmse_is_root_mean_square(v):
    s = Stats.of(v)
    assert s.rmse ** 2 == pytest.approx(np.mean(np.square(v)), rel=1e-12, abs=1e-300)
    assert s.rmse >= s.mean - 1e-9 * max(1.0, s.mean)


def test_integrate_straight_line():
    v = CameraVelocity([0, 0, 1.0], [0, 0, 0])
    traj = integrate_trajectory([(float(k), v, 1.0) for k in range(5)])
    assert len(traj) == 6
    np.testing.assert_allclose([p.translation[2] for p in traj.poses], np.arange(6), atol=1e-15)
    np.testing.assert_allclose(traj.timestamps, np.arange(6))


def test_integrate_quarter_turns_close_the_loop():
    # unit circle: forward speed pi/2 while turning pi/2 about y per step
    v = CameraVelocity([0, 0, np.pi / 2], [0, np.pi / 2, 0])
    traj = integrate_trajectory([(float(k), v, 1.0) for k in range(4)])
    end = traj.poses[-1]
    np.testing.assert_allclose(end.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(end.translation, 0, atol=1e-12)
    # after one step the camera sits on the circle of radius 1
    assert np.linalg.norm(traj.poses[1].translation) == pytest.approx(np.sqrt(2), abs=1e-12)


def test_integrate_round_trip(rng):
    recs = []
    for k in range(20):
        T = random_twist(rng, 0.5)
        recs.append((0.1 * k, T, 0.1))
    traj = integrate_trajectory(recs)
    for k, (_, T, d) in enumerate(recs):
        rel = pose_compose(pose_inverse(traj.poses[k]), traj.poses[k + 1])
        back = pose_to_twist(rel, d)
        assert np.abs(back.vector - T.vector).max() < 1e-9


def test_integrate_order_and_empty():
    v = CameraVelocity()
    with pytest.raises(OrderError):
        integrate_trajectory([(1.0, v, 0.1), (0.5, v, 0.1)])
    with pytest.raises(InsufficientDataError):
        integrate_trajectory([])


def make_pair(rng, n=60):
    ts = 100.0 + 0.033 * np.arange(n)
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(pose_compose(poses[-1], random_pose(rng, 0.02, 0.03)))
    return Trajectory(ts, poses)


def transform(traj, g):
    return Trajectory(traj.timestamps, [pose_compose(g, p) for p in traj.poses])


def test_relative_errors_zero_and_invariant(rng):
    gt = make_pair(rng)
    errs = relative_errors(gt, gt)
    assert len(errs) == len(gt) - 1
    assert max(e.trans_error for e in errs) < 1e-12
    moved = transform(gt, random_pose(rng, 1.0, 5.0))
    errs = relative_errors(moved, gt, delta=3)
    assert len(errs) == len(gt) - 3
    assert max(e.trans_error for e in errs) < 1e-9
    assert max(e.rot_error for e in errs) < 1e-7


def test_relative_errors_time_shift_detected(rng):
    gt = make_pair(rng)
    shifted = Trajectory(gt.timestamps, gt.poses[1:] + [gt.poses[-1]])
    errs = relative_errors(shifted, gt)
    assert np.median([e.trans_error for e in errs]) > 1e-3


def test_association_window(rng):
    gt = make_pair(rng, 10)
    far = Trajectory(gt.timestamps + 1.0, gt.poses)
    assert relative_errors(far, gt) == []


def test_align_rigid_recovers_transform(rng):
    data = rng.standard_normal((30, 3))
    R = rodrigues(rng.standard_normal(3))
    t = rng.standard_normal(3)
    model = data @ R.T + t
    Re, te = align_rigid(model, data)
    np.testing.assert_allclose(Re, R, atol=1e-12)
    np.testing.assert_allclose(te, t, atol=1e-12)
    assert np.linalg.det(Re) == pytest.approx(1.0)


def test_ate_zero_for_identical_and_rigidly_moved(rng):
    gt = make_pair(rng)
    s = ate_snippets(gt, gt)
    assert s.translation.count == len(gt) - 4
    assert s.translation.mean < 1e-13
    for _ in range(10):
        moved = transform(gt, random_pose(rng, 2.0, 10.0))
        assert ate_snippets(moved, gt).translation.rmse < 1e-12
    assert s.rotation is None


def test_ate_noise_magnitude(rng):
    gt = make_pair(rng, 104)
    noisy = Trajectory(gt.timestamps, [Pose(p.rotation, p.translation + 0.01 * rng.standard_normal(3))
                                       for p in gt.poses])
    s = ate_snippets(noisy, gt)
    assert s.translation.count == 100
    assert 0.005 <= s.translation.mean <= 0.02


def test_ate_short_input(rng):
    gt = make_pair(rng, 4)
    with pytest.raises(InsufficientDataError):
        ate_snippets(gt, gt, snippet_len=5)
