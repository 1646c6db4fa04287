"""Outer iteration: convergence on convex instances, start invariance,
the unconstrained fixed point, reduced-cost calculus, and failure modes."""

import math

import numpy as np
import pytest

from ctrlstab import (BoundaryFunction, Discretization, FeFunction,
                      PartitionError, SolveOptions, SolverError,
                      make_disk_mesh, solve_kkt)
from ctrlstab.solver import (objective_value, pair_boundary, reduced_cost,
                             reduced_gradient)

from conftest import make_spec


def test_converges_on_reference(lq_solved32):
    assert lq_solved32.residuals.worst <= 1e-10
    assert lq_solved32.iterations <= 200
    assert lq_solved32.sigma1 == 1.0
    assert len(lq_solved32.history) == lq_solved32.iterations
    assert lq_solved32.history[-1] == lq_solved32.residuals.worst
    assert 0.0 < lq_solved32.theta <= 1.0


def test_trivial_instance_lands_at_zero():
    spec = make_spec(obj_domain="0.5*y^2", alpha="0",
                     constraints=("-1", "-2"))
    disc = Discretization(spec, make_disk_mesh(16, 0))
    rep = solve_kkt(disc, np.zeros(disc.mesh.n_boundary),
                    options=SolveOptions(tol=1e-10))
    assert rep.residuals.worst <= 1e-10
    assert float(np.max(np.abs(rep.point.control.values))) <= 1e-9
    assert float(np.max(np.abs(rep.point.state.values))) <= 1e-9


def test_start_invariance(lq_disc32, lq_solved32):
    rng = np.random.default_rng(12)
    u_ref = lq_solved32.point.control.values
    lam = np.zeros(lq_disc32.mesh.n_boundary)
    for _ in range(5):
        u0 = rng.uniform(-1.0, 1.0, lq_disc32.mesh.n_boundary)
        rep = solve_kkt(lq_disc32, lam, u0=u0,
                        options=SolveOptions(tol=1e-10))
        assert float(np.max(np.abs(rep.point.control.values - u_ref))) <= 1e-6


def test_unconstrained_fixed_point():
    # constraints far below: the converged control is exactly the costate
    # relation (adjoint - alpha) / beta at the nodes
    spec = make_spec(constraints=("-10", "-20"))
    disc = Discretization(spec, make_disk_mesh(16, 0))
    rep = solve_kkt(disc, np.zeros(disc.mesh.n_boundary),
                    options=SolveOptions(tol=1e-10))
    u = rep.point.control.values
    adj = disc.trace(rep.point.adjoint.values)
    assert float(np.max(np.abs(u - adj))) <= 1e-8  # alpha = 0, beta = 1
    for e in rep.point.multipliers:
        assert np.all(e.values == 0.0)


def test_warm_start_not_slower(lq_disc32, lq_solved32):
    # the costate and multipliers restart from zero either way, so the
    # saving is modest; the start must never hurt and must land on the
    # same point
    rep = solve_kkt(lq_disc32, np.zeros(lq_disc32.mesh.n_boundary),
                    u0=lq_solved32.point.control.values,
                    options=SolveOptions(tol=1e-9))
    assert rep.iterations <= lq_solved32.iterations
    diff = rep.point.control.values - lq_solved32.point.control.values
    assert float(np.max(np.abs(diff))) <= 1e-7


def test_solver_error_carries_best_residuals(lq_disc32):
    with pytest.raises(SolverError) as err:
        solve_kkt(lq_disc32, np.zeros(lq_disc32.mesh.n_boundary),
                  options=SolveOptions(max_outer=2, tol=1e-12))
    assert err.value.iterations == 2
    assert err.value.best_residuals is not None
    assert err.value.best_residuals.worst > 1e-12


def test_partition_error_on_identical_constraints():
    spec = make_spec(constraints=("y - 1", "y - 1"))
    disc = Discretization(spec, make_disk_mesh(16, 0))
    with pytest.raises(PartitionError):
        solve_kkt(disc, np.zeros(disc.mesh.n_boundary))


def test_solve_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(tol=0.0)
    with pytest.raises(ValueError):
        SolveOptions(theta=0.0)
    with pytest.raises(ValueError):
        SolveOptions(theta=1.5)
    with pytest.raises(ValueError):
        SolveOptions(max_outer=0)
    opts = SolveOptions()
    assert opts.to_dict()["theta"] == 0.5


def test_lambda_shape_checked(lq_disc16):
    with pytest.raises(ValueError):
        solve_kkt(lq_disc16, np.zeros(7))


# ---------------------------------------------------------------------------
# reduced cost and gradient
# ---------------------------------------------------------------------------


def test_reduced_cost_pure_quadratic_control():
    # zero state and boundary tracking: J(u) = 1/2 int_bnd u^2 ds, so a
    # unit control costs half the perimeter
    spec = make_spec(obj_domain="0", alpha="0")
    disc = Discretization(spec, make_disk_mesh(32, 0))
    nb = disc.mesh.n_boundary
    per = float(np.sum(disc.mesh.edge_lengths()))
    val = reduced_cost(disc, np.zeros(nb), np.ones(nb))
    assert val == pytest.approx(0.5 * per, rel=1e-12)


def test_objective_value_parts(lq_disc16):
    # constant state y = 2: domain part is 1/2 (2-1)^2 |Omega|; control
    # u = 1 at lam = 0 adds 1/2 |Gamma|
    mesh = lq_disc16.mesh
    area = float(np.sum(mesh.triangle_areas()))
    per = float(np.sum(mesh.edge_lengths()))
    y = FeFunction(mesh, np.full(mesh.n_vertices, 2.0))
    u = BoundaryFunction(mesh, np.ones(mesh.n_boundary))
    lam = BoundaryFunction(mesh, np.zeros(mesh.n_boundary))
    val = objective_value(lq_disc16, y, u, lam)
    assert val == pytest.approx(0.5 * area + 0.5 * per, rel=1e-12)


def test_reduced_gradient_matches_fd(lq_disc16):
    rng = np.random.default_rng(13)
    nb = lq_disc16.mesh.n_boundary
    lam = np.zeros(nb)
    u = 0.1 * rng.standard_normal(nb)
    val, grad = reduced_gradient(lq_disc16, lam, u)
    assert val == pytest.approx(reduced_cost(lq_disc16, lam, u), rel=1e-12)
    eps = 1e-6
    for _ in range(3):
        du = rng.standard_normal(nb)
        fd = (reduced_cost(lq_disc16, lam, u + eps * du)
              - reduced_cost(lq_disc16, lam, u - eps * du)) / (2.0 * eps)
        pairing = pair_boundary(lq_disc16, grad.values, du)
        assert abs(fd - pairing) <= 1e-5 * (1.0 + abs(fd))


def test_reduced_gradient_vanishes_unconstrained():
    spec = make_spec(constraints=("-10", "-20"))
    disc = Discretization(spec, make_disk_mesh(16, 0))
    nb = disc.mesh.n_boundary
    rep = solve_kkt(disc, np.zeros(nb), options=SolveOptions(tol=1e-10))
    _, grad = reduced_gradient(disc, np.zeros(nb), rep.point.control.values)
    assert float(np.max(np.abs(grad.values))) <= 1e-7


def test_pair_boundary_is_symmetric_quadrature(lq_disc16):
    rng = np.random.default_rng(14)
    nb = lq_disc16.mesh.n_boundary
    f = rng.standard_normal(nb)
    g = rng.standard_normal(nb)
    ab = pair_boundary(lq_disc16, f, g)
    ba = pair_boundary(lq_disc16, g, f)
    assert ab == pytest.approx(ba, rel=1e-13)
    direct = lq_disc16.integrate_boundary(
        lq_disc16.edge_interp(f) * lq_disc16.edge_interp(g))
    assert ab == pytest.approx(direct, rel=1e-12)


def test_objective_decreases_along_negative_gradient(lq_disc16):
    nb = lq_disc16.mesh.n_boundary
    lam = np.zeros(nb)
    u = np.zeros(nb)
    val, grad = reduced_gradient(lq_disc16, lam, u)
    step = 1e-2
    better = reduced_cost(lq_disc16, lam,
                          u - step * grad.values)
    assert better < val
