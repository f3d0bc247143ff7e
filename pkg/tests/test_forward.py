"""
Forward system - unit tests
Policies, Euler simulation of (x, Y, rho) and the diagnostics built on it.
"""

import numpy as np
import pytest

from src.core.forward import (
    ControlPolicy,
    PerturbedPolicy,
    evaluate_policy,
    export_paths_csv,
    martingale_summary,
    moment_stability,
    simulate_forward,
)
from src.core.noise import NoiseBundle, make_grid, sample_noise
from src.data.builtin_problems import LinearQuadraticBundle, LqParams
from src.data.exceptions import ForwardSimulationError, ProblemDefinitionError
from src.data.problem_model import ControlSet, MarkSpace, ProblemSpec

# ============================================================================
# FIXTURES
# ============================================================================


class LateBlowUpBundle(LinearQuadraticBundle):
    """Drift turns NaN after t = 0.45."""

    def b(self, t, x, u):
        return np.full_like(x, np.nan) if t > 0.45 else np.zeros_like(x)


def _replace_dY(noise, dY):
    return NoiseBundle(dW=noise.dW.copy(), dY=dY, jump_counts=noise.jump_counts.copy(),
                       seed=noise.seed, grid=noise.grid, nu=noise.nu)


# ============================================================================
# POLICIES
# ============================================================================

def test_affine_policy_controls():
    box = ControlSet((-1.0,), (1.0,))
    policy = ControlPolicy.affine(box, 4, bias=0.5, gain=2.0)
    u = policy.controls(0, np.array([0.0, 0.1, 1.0]), np.zeros(3))
    assert u[:, 0].tolist() == pytest.approx([0.5, 0.7, 1.0])


def test_unbounded_policy_clamps_features():
    policy = ControlPolicy.affine(ControlSet.unbounded(1), 2, bias=0.0, gain=1.0, feature_clamp=3.0)
    assert policy.controls(1, np.array([50.0]), np.zeros(1))[0, 0] == 3.0


def test_policy_blocks_span_the_grid():
    policy = ControlPolicy.zeros(ControlSet.unbounded(1), 10, blocks=3)
    covered = [step for b in range(policy.blocks) for step in policy.block_steps(b)]
    assert covered == list(range(10))
    assert all(policy.block_of(s) == b for b in range(3) for s in policy.block_steps(b))


def test_policy_rejects_bad_theta():
    with pytest.raises(ProblemDefinitionError):
        ControlPolicy(np.zeros((2, 1, 5)), 4, ControlSet.unbounded(1))
    with pytest.raises(ProblemDefinitionError):
        ControlPolicy(np.zeros((5, 1, 2)), 4, ControlSet.unbounded(1))


def test_policy_round_trips_through_dict():
    box = ControlSet((-2.0,), (2.0,))
    policy = ControlPolicy.affine(box, 6, bias=0.1, gain=-0.2, average_gain=0.3, blocks=2)
    restored = ControlPolicy.from_dict(policy.to_dict(), box)
    assert np.array_equal(restored.theta, policy.theta)
    assert restored.use_running_average


def test_perturbed_policy_interpolates(zero_policy, lq_spec, grid):
    target = ControlPolicy.affine(lq_spec.control_set, grid.N, bias=1.0, gain=0.0)
    mixed = PerturbedPolicy(zero_policy, target, eps=0.25)
    assert mixed.controls(3, np.zeros(2), np.zeros(2))[:, 0].tolist() == [0.25, 0.25]


def test_perturbed_policy_requires_matching_steps(zero_policy, lq_spec):
    other = ControlPolicy.zeros(lq_spec.control_set, 5)
    with pytest.raises(ProblemDefinitionError):
        PerturbedPolicy(zero_policy, other, eps=0.1)


# ============================================================================
# SIMULATION
# ============================================================================

def test_controls_only_see_past_observations(lq_spec, grid, small_noise, affine_policy):
    fwd = simulate_forward(lq_spec, affine_policy, small_noise, grid)
    dY = small_noise.dY.copy()
    dY[:, 4:] += 1.0
    shifted = simulate_forward(lq_spec, affine_policy, _replace_dY(small_noise, dY), grid)
    assert np.array_equal(fwd.u[:, :5], shifted.u[:, :5])
    assert not np.array_equal(fwd.u[:, 5:], shifted.u[:, 5:])


def test_recorded_controls_match_policy_evaluation(lq_spec, grid, small_noise):
    policy = ControlPolicy.affine(lq_spec.control_set, grid.N, bias=0.1, gain=0.3, average_gain=-0.2)
    fwd = simulate_forward(lq_spec, policy, small_noise, grid)
    for step in (0, 4, grid.N - 1):
        assert np.allclose(evaluate_policy(policy, fwd.Y, step), fwd.u[:, step])


def test_frozen_dynamics_keep_initial_state(frozen_spec, grid, affine_policy):
    noise = sample_noise(grid, frozen_spec.mark_space, 200, seed=1)
    fwd = simulate_forward(frozen_spec, affine_policy, noise, grid)
    assert np.all(fwd.x == 1.0)
    assert np.all(fwd.rho == 1.0)


def test_density_is_a_martingale(lq_variant, grid, affine_policy):
    spec = lq_variant(h0=0.8)
    noise = sample_noise(grid, spec.mark_space, 20_000, seed=3)
    summary = martingale_summary(simulate_forward(spec, affine_policy, noise, grid))
    assert summary["mean"][0] == 1.0
    assert np.max(np.abs(summary["z"])) < 4.0


def test_zero_intensity_matches_zero_jump_size(lq_variant, grid, affine_policy):
    silent = lq_variant(intensity=0.0)
    flat = lq_variant(jump_size=0.0)
    a = simulate_forward(silent, affine_policy, sample_noise(grid, silent.mark_space, 300, seed=4), grid)
    b = simulate_forward(flat, affine_policy, sample_noise(grid, flat.mark_space, 300, seed=4), grid)
    assert np.allclose(a.x, b.x)
    assert np.allclose(a.rho, b.rho)


def test_simulation_does_not_depend_on_workers(lq_spec, grid, affine_policy):
    noise = sample_noise(grid, lq_spec.mark_space, 500, seed=9)
    one = simulate_forward(lq_spec, affine_policy, noise, grid, workers=1)
    four = simulate_forward(lq_spec, affine_policy, noise, grid, workers=4)
    assert np.array_equal(one.x, four.x)


def test_non_finite_state_reports_path_and_step(grid, zero_policy):
    params = LqParams()
    spec = ProblemSpec(n=1, m=1, K=1, T=1.0, x0=(1.0,),
                       mark_space=MarkSpace(("jump",), (1.0,)),
                       control_set=ControlSet((-10.0,), (10.0,)),
                       coefficients=LateBlowUpBundle(params))
    noise = sample_noise(grid, spec.mark_space, 10, seed=0)
    with pytest.raises(ForwardSimulationError) as exc_info:
        simulate_forward(spec, zero_policy, noise, grid)
    assert exc_info.value.path == 0
    assert exc_info.value.step == 6


def test_grid_mismatch_is_rejected(lq_spec, small_noise, zero_policy):
    with pytest.raises(ProblemDefinitionError):
        simulate_forward(lq_spec, zero_policy, small_noise, make_grid(1.0, 20))


def test_policy_step_mismatch_is_rejected(lq_spec, grid, small_noise):
    policy = ControlPolicy.zeros(lq_spec.control_set, grid.N + 1)
    with pytest.raises(ProblemDefinitionError):
        simulate_forward(lq_spec, policy, small_noise, grid)


# ============================================================================
# DIAGNOSTICS & EXPORT
# ============================================================================

def test_moment_stability_is_bounded(lq_spec, affine_policy):
    result = moment_stability(lq_spec, affine_policy, paths=2000, seed=2, N=10)
    assert result["coarse"] > 0
    assert 0.5 < result["ratio"] < 2.0


def test_export_paths_csv(tmp_path, lq_spec, grid, small_noise, zero_policy):
    fwd = simulate_forward(lq_spec, zero_policy, small_noise, grid)
    path = export_paths_csv(fwd, tmp_path / "paths.csv", max_paths=2, header={"seed": 7})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=7"
    assert lines[1] == "path,step,t,x_0,Y,rho,u_0"
    assert len(lines) == 2 + 2 * (grid.N + 1)
    assert lines[2].startswith("0,0,0.0,1.0,")
