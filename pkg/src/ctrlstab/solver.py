"""Damped projection fixed-point solver for the optimality system.

Each outer iteration solves the state equation at the current control,
recovers multipliers from the previous costate through the cell-wise
separation formula, solves the adjoint equation, and then moves the control
toward the half-line projection target::

    u_target = min(-g_max(., y), (adjoint - alpha(lam)) / beta(lam))

by a damped step ``u <- (1 - theta) u + theta u_target``.  Fixed points of
the undamped map are exactly the discrete KKT points, so the five residuals
measure the distance to optimality at every iteration.  The damping adapts
to the worst residual: halve on increase, grow by 1.2 (capped at 1) on
decrease.

The module also provides the objective value and the adjoint-based reduced
gradient of the control-to-cost map (with inactive constraints), which the
derivative integrity checks difference against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import BoundaryFunction, Discretization, FeFunction
from .kkt import (KktPoint, KktResiduals, check_beta_floor,
                  constraint_values, partition_at, recover_multipliers,
                  residuals)
from .pde import linearized_operator, solve_adjoint, solve_state


class SolverError(RuntimeError):
    """Outer iteration failure; carries the best residuals seen."""

    def __init__(self, message: str, iterations: int,
                 best: KktResiduals | None):
        self.iterations = iterations
        self.best_residuals = best
        worst = f"{best.worst:.3e}" if best is not None else "n/a"
        super().__init__(f"{message} after {iterations} iterations "
                         f"(best residual {worst})")


class PartitionError(RuntimeError):
    """The constraint dominance margin degenerated along the iteration."""


@dataclass
class SolveOptions:
    """Outer solver knobs.

    ``tol`` bounds the worst of the five residuals; ``theta`` is the initial
    damping factor, adapted when ``adaptive`` is set.
    """

    max_outer: int = 200
    tol: float = 1e-9
    theta: float = 0.5
    adaptive: bool = True
    theta_min: float = 1e-3
    newton_tol: float = 1e-11
    newton_max_iter: int = 50

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")

    def to_dict(self) -> dict:
        return {"max_outer": self.max_outer, "tol": self.tol,
                "theta": self.theta, "adaptive": self.adaptive,
                "theta_min": self.theta_min, "newton_tol": self.newton_tol,
                "newton_max_iter": self.newton_max_iter}


@dataclass
class KktSolveReport:
    """Solver outcome: the point, its residuals, and iteration diagnostics."""

    point: KktPoint
    residuals: KktResiduals
    iterations: int
    theta: float
    sigma1: float
    history: list = field(default_factory=list, repr=False)


def _boundary(disc: Discretization, values) -> np.ndarray:
    if isinstance(values, BoundaryFunction):
        values = values.values
    v = np.asarray(values, dtype=float)
    if v.shape != (disc.mesh.n_boundary,):
        raise ValueError(f"expected boundary shape ({disc.mesh.n_boundary},), "
                         f"got {v.shape}")
    return v


def solve_kkt(disc: Discretization, lam, u0=None,
              options: SolveOptions | None = None) -> KktSolveReport:
    """Drive the damped projection iteration to a KKT point at ``lam``.

    Raises ``SolverError`` when ``max_outer`` iterations do not reach
    ``tol`` and ``PartitionError`` when the dominance margin sigma1 drops
    to zero or below along the way.
    """
    opts = options or SolveOptions()
    lam = _boundary(disc, lam)
    u = np.zeros_like(lam) if u0 is None else _boundary(disc, u0).copy()
    check_beta_floor(disc, lam)
    alpha = disc.eval_node(disc.problem.alpha, lam=lam)
    beta = disc.eval_node(disc.problem.beta, lam=lam)

    adjoint = np.zeros(disc.mesh.n_vertices)
    e_vals = np.zeros((disc.problem.m, disc.mesh.n_boundary))
    y_warm = None
    theta = opts.theta
    best: KktResiduals | None = None
    history: list = []
    lam_fn = BoundaryFunction(disc.mesh, lam)

    for it in range(1, opts.max_outer + 1):
        state = solve_state(disc, u, lam, y0=y_warm,
                            tol=opts.newton_tol,
                            max_iter=opts.newton_max_iter)
        y_warm = state.state.values

        part = partition_at(disc, y_warm, lam)
        if not (part.sigma1 > 0.0):
            raise PartitionError(
                f"constraint separation margin sigma1 = {part.sigma1:.3e} "
                f"at iteration {it}; the dominance partition is degenerate")

        # the multiplier refresh shares the damping factor: the undamped
        # costate/multiplier alternation has loop gain above 1 on active
        # sets, while the damped update keeps the same fixed points
        raw = recover_multipliers(disc, y_warm, u, adjoint, lam, part)
        e_vals = (1.0 - theta) * e_vals \
            + theta * np.stack([e.values for e in raw])
        mults = tuple(BoundaryFunction(disc.mesh, row.copy())
                      for row in e_vals)
        op = linearized_operator(disc, y_warm)
        adj_fn = solve_adjoint(disc, y_warm, lam, mults, operator=op)
        adjoint = adj_fn.values

        point = KktPoint(state=state.state,
                         control=BoundaryFunction(disc.mesh, u.copy()),
                         adjoint=adj_fn, multipliers=mults, param=lam_fn)
        res = residuals(disc, point)
        history.append(res.worst)
        if best is None or res.worst < best.worst:
            best = res
        if res.worst <= opts.tol:
            return KktSolveReport(point=point, residuals=res, iterations=it,
                                  theta=theta, sigma1=part.sigma1,
                                  history=history)

        if opts.adaptive and len(history) >= 2:
            if history[-1] > history[-2]:
                theta = max(opts.theta_min, 0.5 * theta)
            else:
                theta = min(1.0, 1.2 * theta)

        g_max = np.max(constraint_values(disc, y_warm, lam), axis=0)
        target = np.minimum(-g_max, (disc.trace(adjoint) - alpha) / beta)
        u = (1.0 - theta) * u + theta * target

    raise SolverError("outer iteration did not converge",
                      opts.max_outer, best)


def objective_value(disc: Discretization, y, u, lam) -> float:
    """Objective by the fixed quadrature rules::

        J = int L(x, y) dx
          + int_bnd (l(x, y, lam) + alpha(lam) u + beta(lam) u^2 / 2) ds.
    """
    p = disc.problem
    y = y.values if isinstance(y, FeFunction) else np.asarray(y, float)
    u = u.values if isinstance(u, BoundaryFunction) else np.asarray(u, float)
    lam = lam.values if isinstance(lam, BoundaryFunction) else np.asarray(lam, float)
    val = disc.integrate_domain(disc.eval_dom(p.obj_domain, y=y))
    uq = disc.edge_interp(u)
    bnd = disc.eval_bnd(p.obj_boundary, y=y, lam=lam) \
        + disc.eval_bnd(p.alpha, lam=lam) * uq \
        + 0.5 * disc.eval_bnd(p.beta, lam=lam) * uq ** 2
    return float(val + disc.integrate_boundary(bnd))


def reduced_cost(disc: Discretization, lam, u,
                 newton_tol: float = 1e-12) -> float:
    """Cost of the control ``u`` at parameter ``lam`` through the state map."""
    lam = _boundary(disc, lam)
    u = _boundary(disc, u)
    state = solve_state(disc, u, lam, tol=newton_tol)
    return objective_value(disc, state.state, u, lam)


def reduced_gradient(disc: Discretization, lam, u,
                     newton_tol: float = 1e-12):
    """Value and adjoint-based gradient of the reduced cost.

    The gradient is the boundary density ``alpha + beta u - adjoint`` (with
    the constraint-free adjoint): the directional derivative along ``du`` is
    its boundary L2 pairing with ``du``.  Returns ``(value, gradient)``.
    """
    lam = _boundary(disc, lam)
    u = _boundary(disc, u)
    state = solve_state(disc, u, lam, tol=newton_tol)
    zero = tuple(BoundaryFunction(disc.mesh, np.zeros_like(lam))
                 for _ in range(disc.problem.m))
    adj = solve_adjoint(disc, state.state.values, lam, zero)
    alpha = disc.eval_node(disc.problem.alpha, lam=lam)
    beta = disc.eval_node(disc.problem.beta, lam=lam)
    grad = alpha + beta * u - disc.trace(adj.values)
    value = objective_value(disc, state.state, u, lam)
    return value, BoundaryFunction(disc.mesh, grad)


def pair_boundary(disc: Discretization, f, g) -> float:
    """Boundary L2 pairing of two boundary nodal fields."""
    f = _boundary(disc, f)
    g = _boundary(disc, g)
    return float(f @ (disc.form.mass_boundary_bb @ g))


__all__ = [
    "SolverError", "PartitionError", "SolveOptions", "KktSolveReport",
    "solve_kkt", "objective_value", "reduced_cost", "reduced_gradient",
    "pair_boundary",
]
