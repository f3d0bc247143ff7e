import json

import numpy as np
import pytest

from src.core.bsde import PicardSettings
from src.core.forward import ControlPolicy
from src.core.noise import make_grid, sample_noise
from src.core.regression import BasisSpec
from src.data.builtin_problems import LqParams, builtin_lq_problem
from src.observability.metrics import reset_metrics
from src.observability.tracing import initialize_tracing


def pytest_configure(config):
    """Initialize tracing for the test session."""
    initialize_tracing(
        service_name="pomp-tests",
        environment="testing",
    )


@pytest.fixture(autouse=True)
def fresh_metrics():
    reset_metrics()
    yield
    reset_metrics()


# ============================================================================
# PROBLEMS
# ============================================================================

FROZEN = dict(a=0.0, b_u=0.0, b0=0.0, c1=0.0, c2=0.0, jump_size=0.0, h0=0.0, hx=0.0)


@pytest.fixture
def lq_variant():
    """Factory for LQ specs with some parameters changed."""
    def _build(**updates):
        return builtin_lq_problem(LqParams(**updates))
    return _build


@pytest.fixture
def lq_params():
    return LqParams()


@pytest.fixture
def lq_spec(lq_params):
    return builtin_lq_problem(lq_params)


@pytest.fixture
def frozen_spec(lq_variant):
    """x stays at x0; only the running cost 1/2 u^2 is left."""
    return lq_variant(**FROZEN, qx=0.0, qu=1.0, wT=0.0, phi0=0.0)


@pytest.fixture
def open_loop_params():
    """Costate oracle setting: h free of x, no y coupling in the cost."""
    return LqParams(hx=0.0, fy=0.0, gamma_weight=0.0)


# ============================================================================
# GRIDS & NOISE
# ============================================================================

@pytest.fixture
def grid():
    return make_grid(1.0, 10)


@pytest.fixture
def small_noise(lq_spec, grid):
    return sample_noise(grid, lq_spec.mark_space, 2000, seed=7)


@pytest.fixture
def basis():
    return BasisSpec(degree=2)


@pytest.fixture
def picard():
    return PicardSettings(max_sweeps=20, tol=1e-8)


@pytest.fixture
def zero_policy(lq_spec, grid):
    return ControlPolicy.zeros(lq_spec.control_set, grid.N)


@pytest.fixture
def affine_policy(lq_spec, grid):
    return ControlPolicy.affine(lq_spec.control_set, grid.N, bias=0.2, gain=-0.4)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# ============================================================================
# CONFIG FILES
# ============================================================================

@pytest.fixture
def write_config(tmp_path):
    """Write a config dict as JSON under tmp_path and return its path."""
    def _write(data, name="experiment.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path
    return _write


@pytest.fixture
def small_config(tmp_path):
    return {
        "problem": {"builtin": "lq"},
        "grid": {"N": 8},
        "monte_carlo": {"paths": 1500, "seed": 5},
        "optimizer": {"max_iters": 15, "tol": 2e-2},
        "checks": {
            "hamiltonian_points": 20,
            "gradient_directions": 2,
            "difference_pairs": 1,
            "convexity_samples": 20,
            "moment_paths": 500,
            "export_paths": 3,
        },
        "outputs": {"directory": str(tmp_path / "results")},
    }


@pytest.fixture
def frozen():
    """LQ parameter overrides that freeze the state dynamics and the observation drift."""
    return dict(FROZEN)
