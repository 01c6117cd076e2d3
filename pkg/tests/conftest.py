import numpy as np
import pytest

from probfusion.ba import BlockSparseHessian
from probfusion.geometry import Intrinsics
from probfusion.scene import NoiseModel, default_scene, default_trajectory, synthesize_factor_graph


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_K():
    return Intrinsics.from_fov(16, 12, 90.0)


@pytest.fixture(scope="session")
def small_trajectory():
    return default_trajectory(5)


@pytest.fixture(scope="session")
def noiseless_graph(small_K, small_trajectory):
    noise = NoiseModel(sigma_flow=0.5, noiseless=True)
    return synthesize_factor_graph(default_scene(), small_trajectory, small_K, noise, 2)


@pytest.fixture(scope="session")
def perturbed_noiseless_graph(small_K, small_trajectory):
    noise = NoiseModel(sigma_flow=0.5, pose_noise_rot=0.01, pose_noise_trans=0.01, depth_noise=0.05, noiseless=True)
    return synthesize_factor_graph(default_scene(), small_trajectory, small_K, noise, 2, gauge=(0, 1))


def random_arrow_system(rng, n_poses: int, n_depths: int, density: float = 0.3) -> BlockSparseHessian:
    """SPD arrow system built as J'J from a random sparse Jacobian."""
    m = 6 * n_poses
    rows = 3 * (m + n_depths)
    J_pose = rng.standard_normal((rows, m))
    J_dep = np.zeros((rows, n_depths))
    # each residual row touches one depth, so the depth block stays diagonal
    owner = rng.integers(0, n_depths, rows)
    J_dep[np.arange(rows), owner] = rng.standard_normal(rows)
    J_pose *= rng.random((rows, m)) < density
    J = np.hstack([J_pose, J_dep])
    H = J.T @ J + 1e-3 * np.eye(m + n_depths)
    b = rng.standard_normal(m + n_depths)
    return BlockSparseHessian(H[:m, :m], H[:m, m:], np.diag(H[m:, m:]).copy(), b[:m], b[m:])


_CRITERIA: dict[str, str] = {}


@pytest.fixture
def criterion():
    """Record a one-line acceptance verdict, printed in the terminal summary."""

    def record(key: str, passed: bool | None, detail: str) -> None:
        status = "REPORT" if passed is None else ("PASS" if passed else "FAIL")
        _CRITERIA[key] = f"{key}: {status}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[key])
