import os

import numpy as np
import pytest

from data_model import from_frame
from scm_oracle import SyntheticSCM
from tests.synthetic import CONFOUNDED_ROLES, confounded_frame


@pytest.fixture
def write_csv(tmp_path):
    """Write text to a CSV under tmp_path and return its path"""

    def _write(text: str, name: str = "data.csv") -> str:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    return _write


@pytest.fixture
def confounded():
    return from_frame(confounded_frame(0), CONFOUNDED_ROLES)


@pytest.fixture
def witness_scm():
    """Two confounder states, two x values, two bins; uniform gamma cancels exactly"""
    gamma = np.array([0.5, 0.5])
    beta = np.array([[0.5, 0.25], [0.5, 0.75]])
    alpha = np.array(
        [
            [[0.5, 0.5], [0.125, 0.75]],
            [[0.5, 0.5], [0.875, 0.25]],
        ]
    )
    return SyntheticSCM(gamma, beta, alpha)


def _env_path(var: str) -> str:
    path = os.getenv(var)
    if not path or not os.path.exists(path):
        pytest.skip(f"set {var} to a local copy of the file to run this check")
    return path


@pytest.fixture
def nsw_path():
    return _env_path("CFL_NSW_CSV")


@pytest.fixture
def voting_path():
    return _env_path("CFL_VOTING_CSV")
