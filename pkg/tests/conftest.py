import numpy as np
import pytest

from egoflow.geometry import CameraIntrinsics, CameraVelocity, InverseDepthMap


def random_intrinsics(rng, w, h):
    f = rng.uniform(0.6, 1.2) * w
    return CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), (w - 1) / 2 + rng.uniform(-3, 3),
                            (h - 1) / 2 + rng.uniform(-3, 3), w, h)


def random_rho(rng, shape, lo=0.2, hi=2.0, holes=0.0):
    rho = rng.uniform(lo, hi, shape)
    valid = rng.random(shape) >= holes
    return InverseDepthMap(np.where(valid, rho, 0.0), valid)


def random_twist(rng, scale=0.01):
    return CameraVelocity(rng.standard_normal(3) * scale, rng.standard_normal(3) * scale)


def rel_err(a, b):
    a = a.vector if isinstance(a, CameraVelocity) else np.asarray(a)
    b = b.vector if isinstance(b, CameraVelocity) else np.asarray(b)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def record(criterion, ok, detail, status=None):
    line = f"{status or ('PASS' if ok else 'FAIL')}  {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
