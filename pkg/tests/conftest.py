import sys
import numpy as np
import pytest
from hypothesis import strategies as st

from hallmap.geometry import PoseSE3, Rotation, se3_log

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
unit_quats = (
    st.tuples(*[st.floats(-1.0, 1.0, allow_nan=False) for _ in range(4)])
    .filter(lambda q: np.linalg.norm(q) > 0.1)
    .map(lambda q: Rotation(np.asarray(q)))
)
poses = st.builds(lambda r, t: PoseSE3(r, t), unit_quats, st.tuples(finite, finite, finite))


def random_pose(rng, max_angle=np.pi, max_trans=5.0) -> PoseSE3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return PoseSE3(Rotation.from_rotvec(axis * rng.uniform(0, max_angle)), rng.uniform(-max_trans, max_trans, 3))


def pose_error(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """(translation error, rotation angle) between two poses."""
    d = a.inverse() @ b
    return float(np.linalg.norm(a.translation - b.translation)), float(d.rotation.angle)


def twist_error(a: PoseSE3, b: PoseSE3) -> float:
    return float(np.abs(se3_log(a.inverse() @ b)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, notes = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: " + "; ".join(notes))
