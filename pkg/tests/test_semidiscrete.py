"""Semi-discrete solver: validation, convergence, diagnostics.

The oracle here is deliberately dumb: per-coordinate bisection against
full cell-mass rasterizations through the public gconvex API, iterated
to a fixed point, with no incremental caching and no clamping shortcuts.
"""

import numpy as np
import pytest

from gjet.errors import (
    AnchorInadmissible,
    InfeasibleBracket,
    MassImbalance,
    NoConvergence,
)
from gjet.gconvex import (
    PiecewiseGSolution,
    SourceGrid,
    cell_masses,
    values_matrix,
)
from gjet.genfun import dual_H
from gjet.semidiscrete import (
    SemiDiscreteProblem,
    SolverTolerances,
    lipschitz_diagnostic,
    range_diagnostic,
    solution_function,
    solve,
    validate_problem,
)


def unit_problem(gf, targets, masses=None, res=48, u0=0.75, x0=None,
                 tolerances=None):
    grid = SourceGrid([0.0, 0.0], [1.0, 1.0], [res, res])
    targets = np.asarray(targets, dtype=float)
    if masses is None:
        masses = np.full(len(targets), grid.total_mass / len(targets))
    if x0 is None:
        x0 = np.array([0.5, 0.5])
    return SemiDiscreteProblem(gf, grid, targets, masses, (x0, u0),
                               tolerances=tolerances or SolverTolerances())


def oracle_solve(prob, sweeps=30, steps=48):
    """Independent fixed-point iteration by raw bisection on each piece."""
    gf, grid = prob.gf, prob.grid
    x0, u0 = prob.anchor
    z_lo = np.array([dual_H(gf, x0, y, u0).z_root for y in prob.targets])
    z_hi = np.empty(len(prob.targets))
    for i, y in enumerate(prob.targets):
        _lo, hi = gf.z_interval_batch(grid.centers, y)
        z_hi[i] = np.min(hi) * (1 - 1e-12)

    def masses_for(z):
        sol = PiecewiseGSolution(
            gf, [(tuple(y), float(zi)) for y, zi in zip(prob.targets, z)],
            prob.anchor)
        return cell_masses(sol, grid).masses

    z = z_lo.copy()
    for _ in range(sweeps):
        z_prev = z.copy()
        for i in range(len(z)):
            a, b = z_lo[i], z_hi[i]

            def mass_i(zi):
                trial = z.copy()
                trial[i] = zi
                return masses_for(trial)[i]

            if mass_i(a) <= prob.masses[i]:
                z[i] = a
                continue
            for _ in range(steps):
                mid = 0.5 * (a + b)
                if mass_i(mid) >= prob.masses[i]:
                    a = mid
                else:
                    b = mid
            z[i] = a if abs(mass_i(a) - prob.masses[i]) \
                <= abs(mass_i(b) - prob.masses[i]) else b
        if np.max(np.abs(z - z_prev)) < 1e-13:
            break
    return z, masses_for(z)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------

def test_validate_clean_problem(pb2):
    prob = unit_problem(pb2, [[0.25, 0.5], [0.75, 0.5]])
    assert validate_problem(prob) == []


def test_validate_mass_imbalance(pb2):
    grid_mass = SourceGrid([0, 0], [1, 1], [48, 48]).total_mass
    prob = unit_problem(pb2, [[0.25, 0.5], [0.75, 0.5]],
                        masses=[0.5 * grid_mass, 0.4 * grid_mass])
    diags = validate_problem(prob)
    assert any(d["kind"] == "MassImbalance" for d in diags)
    with pytest.raises(MassImbalance):
        validate_problem(prob, raise_on_error=True)


def test_validate_anchor_inadmissible(pb2):
    # u0 below m0 + K0 dist(x0, boundary) = 0 + 1 * 0.5
    prob = unit_problem(pb2, [[0.5, 0.5]], u0=0.3)
    diags = validate_problem(prob)
    assert any(d["kind"] == "AnchorInadmissible" for d in diags)
    with pytest.raises(AnchorInadmissible):
        solve(prob)


def test_validate_infeasible_bracket(pb2):
    # far target with a low anchor: the anchored parameter exceeds the
    # grid-admissible cap (verified numerically for this geometry)
    prob = unit_problem(pb2, [[60.0, 60.0]], u0=0.11, x0=[0.1, 0.1])
    diags = validate_problem(prob)
    assert any(d["kind"] == "InfeasibleBracket" for d in diags)
    with pytest.raises(InfeasibleBracket):
        solve(prob)


# --------------------------------------------------------------------------
# solve
# --------------------------------------------------------------------------

def test_single_target_exact(pb2):
    prob = unit_problem(pb2, [[0.5, 0.5]])
    state = solve(prob)
    # the one cell carries all mass up to float summation order
    assert state.residual <= 1e-12
    assert state.sweeps == 0
    z_ref = dual_H(pb2, [0.5, 0.5], [0.5, 0.5], 0.75).z_root
    assert state.z[0] == pytest.approx(z_ref, abs=1e-12)


def test_symmetric_pair_equal_parameters(pb2):
    prob = unit_problem(pb2, [[0.25, 0.5], [0.75, 0.5]])
    state = solve(prob)
    assert abs(state.z[0] - state.z[1]) <= 1e-9
    assert state.residual <= prob.tolerances.mass_tol_rel
    assert abs(state.anchor_value - 0.75) <= 1e-8 * (1 + 0.75)


def test_asymmetric_three_targets_against_oracle(pb2):
    targets = [[0.2, 0.3], [0.7, 0.6], [0.5, 0.85]]
    grid_mass = SourceGrid([0, 0], [1, 1], [48, 48]).total_mass
    masses = np.array([0.5, 0.3, 0.2]) * grid_mass
    prob = unit_problem(pb2, targets, masses=masses)
    state = solve(prob)
    assert state.residual <= prob.tolerances.mass_tol_rel
    z_oracle, m_oracle = oracle_solve(prob)
    tol = 2 * prob.tolerances.mass_tol_rel * grid_mass
    assert np.max(np.abs(state.decomposition.masses - m_oracle)) <= tol


def test_permutation_invariance(pb2):
    targets = [[0.2, 0.3], [0.7, 0.6], [0.5, 0.85]]
    grid_mass = SourceGrid([0, 0], [1, 1], [48, 48]).total_mass
    masses = np.array([0.5, 0.3, 0.2]) * grid_mass
    perm = [2, 0, 1]
    s1 = solve(unit_problem(pb2, targets, masses=masses))
    s2 = solve(unit_problem(pb2, [targets[k] for k in perm],
                            masses=masses[perm]))
    assert np.max(np.abs(s1.z[perm] - s2.z)) <= 1e-9


def test_determinism(pb2):
    targets = [[0.2, 0.3], [0.7, 0.6], [0.5, 0.85]]
    grid_mass = SourceGrid([0, 0], [1, 1], [48, 48]).total_mass
    masses = np.array([0.5, 0.3, 0.2]) * grid_mass
    s1 = solve(unit_problem(pb2, targets, masses=masses))
    s2 = solve(unit_problem(pb2, targets, masses=masses))
    assert np.array_equal(s1.z, s2.z)
    assert s1.residual == s2.residual
    assert s1.residual_history == s2.residual_history


def test_residual_monotone_after_first_sweep(pb2):
    pts = [((i + 0.5) / 4, (j + 0.5) / 4) for i in range(4) for j in range(4)]
    prob = unit_problem(pb2, pts, res=64)
    state = solve(prob)
    hist = state.residual_history
    assert all(hist[k + 1] <= hist[k] + 1e-15 for k in range(1, len(hist) - 1))


def test_partition_invariant_at_solution(pb2):
    prob = unit_problem(pb2, [[0.3, 0.4], [0.7, 0.6]])
    state = solve(prob)
    assert state.decomposition.masses.sum() == \
        pytest.approx(prob.grid.total_mass, rel=1e-13)


def test_duplicate_target_infeasible(pb2):
    prob = unit_problem(pb2, [[0.5, 0.5], [0.5, 0.5]],
                        tolerances=SolverTolerances(max_sweeps=20))
    with pytest.raises(InfeasibleBracket) as exc_info:
        solve(prob)
    assert exc_info.value.piece_index == 1


def test_no_convergence_carries_best_state(pb2):
    # one sweep cannot finish an asymmetric three-target problem
    targets = [[0.2, 0.3], [0.7, 0.6], [0.5, 0.85]]
    grid_mass = SourceGrid([0, 0], [1, 1], [48, 48]).total_mass
    masses = np.array([0.5, 0.3, 0.2]) * grid_mass
    prob = unit_problem(
        pb2, targets, masses=masses,
        tolerances=SolverTolerances(mass_tol_rel=1e-9, max_sweeps=1))
    with pytest.raises(NoConvergence) as exc_info:
        solve(prob)
    assert exc_info.value.best is not None
    assert exc_info.value.best.residual < 1.0


def test_solve_other_generators():
    from gjet.genfun import PointSourcePlane, QuadraticOT

    qot = QuadraticOT(2)
    grid = SourceGrid([0, 0], [1, 1], [64, 64])
    prob = SemiDiscreteProblem(
        qot, grid, [[0.313, 0.416], [0.684, 0.591]],
        [grid.total_mass * 0.6, grid.total_mass * 0.4], ([0.5, 0.5], 0.2))
    state = solve(prob)
    assert state.residual <= prob.tolerances.mass_tol_rel
    assert abs(state.anchor_value - 0.2) <= 1e-8 * 1.2

    ps = PointSourcePlane(2, tau=-1.0)
    g2 = SourceGrid([-0.4, -0.4], [0.4, 0.4], [64, 64])
    prob = SemiDiscreteProblem(
        ps, g2, [[0.17, 0.03], [-0.22, -0.08], [0.02, 0.21]],
        g2.total_mass * np.array([0.5, 0.3, 0.2]), ([0.0, 0.0], 2.5))
    state = solve(prob)
    assert state.residual <= prob.tolerances.mass_tol_rel
    assert abs(state.anchor_value - 2.5) <= 1e-8 * 3.5
    # the transform involution holds for this generator as well
    from gjet.gconvex import dual_transform, g_transform

    sol = solution_function(prob, state.z)
    v = g_transform(sol, prob.targets, g2)
    vstar = dual_transform(ps, prob.targets, v, g2)
    u = values_matrix(sol, g2).max(axis=0).reshape(g2.res)
    assert np.max(np.abs(vstar - u)) <= 1e-6


def test_validate_rejects_inadmissible_source_box():
    from gjet.errors import DomainViolation
    from gjet.genfun import PointSourcePlane

    # the unit square leaves the |x| < 1 ball at its far corner
    ps = PointSourcePlane(2, tau=-1.0)
    grid = SourceGrid([0, 0], [1, 1], [32, 32])
    prob = SemiDiscreteProblem(ps, grid, [[0.2, 0.0]], [grid.total_mass],
                               ([0.5, 0.5], 2.5))
    diags = validate_problem(prob)
    assert any(d["kind"] == "DomainViolation" for d in diags)
    with pytest.raises(DomainViolation):
        solve(prob)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------

def test_lipschitz_parallel_beam_bound(pb2):
    prob = unit_problem(pb2, [[0.3, 0.4], [0.7, 0.6]])
    state = solve(prob)
    h = float(np.max(prob.grid.h))
    val = lipschitz_diagnostic(state, prob)
    assert val <= 1.0 + 2 * h   # declared gradient bound K0 = 1


def test_lipschitz_quadratic_single_piece(qot2):
    prob = unit_problem(qot2, [[0.5, 0.5]], u0=0.2)
    state = solve(prob)
    sol = solution_function(prob, state.z)
    val = lipschitz_diagnostic(state, prob)
    # gradient of |x - y1|^2/2 is |x - y1|, maximal at the far corner
    far = max(np.linalg.norm(c - np.array([0.5, 0.5]))
              for c in prob.grid.centers)
    assert val == pytest.approx(far, rel=0.1)


def test_solution_positive_everywhere(pb2):
    prob = unit_problem(pb2, [[0.3, 0.4], [0.7, 0.6]])
    state = solve(prob)
    sol = solution_function(prob, state.z)
    u = values_matrix(sol, prob.grid).max(axis=0)
    assert np.all(u > 0)


def test_range_diagnostic_pass_and_fail(pb2):
    prob = unit_problem(pb2, [[0.25, 0.25], [0.75, 0.25],
                              [0.25, 0.75], [0.75, 0.75]])
    state = solve(prob)
    rep = range_diagnostic(state, prob)
    assert rep.status == "pass"
    assert rep.details["interfaces_checked"] > 0
    # shrink the declared hull so interpolated targets fall outside
    shrunk = np.array([[0.25, 0.25], [0.30, 0.25], [0.25, 0.30]])
    rep = range_diagnostic(state, prob, omega_star_hull=shrunk)
    assert rep.status == "fail"
