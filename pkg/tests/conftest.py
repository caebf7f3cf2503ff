import numpy as np
import pytest

from fedbilevel.problems import QuadraticBilevelOracle


@pytest.fixture
def identity_instance():
    """f = ||y - b||^2 / 2 with b = [1, 0], g = ||y - x||^2 / 2."""
    return QuadraticBilevelOracle(
        coupling=np.eye(2), hessian=np.eye(2), target=np.array([1.0, 0.0])
    )


def scalar_instance(hess: float = 1.0, target: float = 0.0) -> QuadraticBilevelOracle:
    """1-D constant-Hessian instance: g = h (y - x)^2 / 2, f = (y - b)^2 / 2."""
    return QuadraticBilevelOracle(
        coupling=np.array([[1.0]]),
        hessian=np.array([[hess]]),
        target=np.array([target]),
    )
