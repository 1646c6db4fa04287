"""State, adjoint, and linearized solves for the semilinear Neumann problem.

Weak state equation (P1, fixed quadrature)::

    a(y, v) + int h(x, y) v dx = int_bnd (u + lam) v ds     for all v,

with ``a`` the diffusion + a0 reaction form.  Newton's method uses the exact
consistent Jacobian ``K + M[h_y(., y)]`` (the h_y-weighted mass), which keeps
the iteration quadratically convergent; steps are damped by halving on the
residual norm.  Monotonicity of h (dh/dy >= 0) makes every Jacobian SPD.

The adjoint problem is linear in the costate::

    (K + M[h_y(., y)]) p = -load(dL/dy) - bload(dl/dy + sum_i e_i dg_i/dy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import (BoundaryFunction, Discretization, FeFunction,
                  SpdFactorization, norm, solve_spd)


class StateSolveError(RuntimeError):
    """Newton did not reach the state tolerance."""

    def __init__(self, message: str, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"{message} (iterations={iterations}, "
                         f"residual={residual:.3e})")


@dataclass
class StateSolveReport:
    """Converged state with iteration diagnostics.

    ``ratio`` is the a-priori quotient ``||y||_W1r / (||u|| + ||lam||)``
    (both control norms in L2 of the boundary); it is 0 for zero data and
    inf if a nonzero state came from zero data.
    """

    state: FeFunction
    iterations: int
    residual: float
    tolerance: float
    ratio: float


def _nodal(values, n: int) -> np.ndarray:
    if isinstance(values, BoundaryFunction):
        values = values.values
    if isinstance(values, FeFunction):
        values = values.values
    v = np.asarray(values, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"expected shape ({n},), got {v.shape}")
    return v


def solve_state(disc: Discretization, u, lam, y0=None,
                tol: float = 1e-11, max_iter: int = 50) -> StateSolveReport:
    """Solve the semilinear state equation for boundary data ``u + lam``.

    ``tol`` is scaled by ``1 + ||b||_2`` with ``b`` the assembled load.
    Raises ``StateSolveError`` after ``max_iter`` Newton steps or a failed
    line search (30 halvings without residual decrease).
    """
    mesh = disc.mesh
    nb = mesh.n_boundary
    u = _nodal(u, nb)
    lam = _nodal(lam, nb)
    k_mat = disc.form.stiffness
    b = disc.form.mass_boundary @ disc.embed(u + lam)
    tol_abs = tol * (1.0 + float(np.linalg.norm(b)))

    y = np.zeros(mesh.n_vertices) if y0 is None \
        else _nodal(y0, mesh.n_vertices).copy()

    def residual_vec(yv):
        hq = disc.eval_dom(disc.problem.reaction, y=yv)
        return k_mat @ yv + disc.domain_load(hq) - b

    f_vec = residual_vec(y)
    res = float(np.linalg.norm(f_vec))
    iterations = 0
    while res > tol_abs:
        if iterations >= max_iter:
            raise StateSolveError("Newton iteration limit reached",
                                  iterations, res)
        hy = disc.eval_dom(disc.problem.reaction_y, y=y)
        jac = k_mat + disc.domain_mass_weighted(hy)
        delta = solve_spd(jac, -f_vec)

        sigma = 1.0
        for _ in range(30):
            y_try = y + sigma * delta
            f_try = residual_vec(y_try)
            res_try = float(np.linalg.norm(f_try))
            if res_try <= (1.0 - 1e-4 * sigma) * res:
                break
            sigma *= 0.5
        else:
            raise StateSolveError("line search failed", iterations, res)
        y, f_vec, res = y_try, f_try, res_try
        iterations += 1

    state = FeFunction(mesh, y)
    num = norm(state, "w1r", disc.problem.r)
    den = disc.l2_boundary(u) + disc.l2_boundary(lam)
    if den > 0.0:
        ratio = num / den
    else:
        ratio = 0.0 if num <= 1e-10 else float("inf")
    return StateSolveReport(state=state, iterations=iterations, residual=res,
                            tolerance=tol_abs, ratio=ratio)


def state_residual_norm(disc: Discretization, y, u, lam) -> float:
    """Algebraic 2-norm of the discrete state equation residual."""
    y = _nodal(y, disc.mesh.n_vertices)
    u = _nodal(u, disc.mesh.n_boundary)
    lam = _nodal(lam, disc.mesh.n_boundary)
    hq = disc.eval_dom(disc.problem.reaction, y=y)
    vec = (disc.form.stiffness @ y + disc.domain_load(hq)
           - disc.form.mass_boundary @ disc.embed(u + lam))
    return float(np.linalg.norm(vec))


def adjoint_rhs(disc: Discretization, y: np.ndarray, lam: np.ndarray,
                multipliers) -> np.ndarray:
    """Right-hand side of the adjoint system (negative gradient loads)."""
    p = disc.problem
    ly = disc.eval_dom(p.obj_domain_y, y=y)
    bnd = disc.eval_bnd(p.obj_boundary_y, y=y, lam=lam)
    for gy, e in zip(p.constraints_y, multipliers):
        e_vals = e.values if isinstance(e, BoundaryFunction) else np.asarray(e, float)
        bnd = bnd + disc.eval_bnd(gy, y=y, lam=lam) * disc.edge_interp(e_vals)
    return -disc.domain_load(ly) - disc.boundary_load(bnd)


def linearized_operator(disc: Discretization, y) -> SpdFactorization:
    """Factorized ``K + M[h_y(., y)]``, shared by adjoint and linearized
    state solves at the same state."""
    y = _nodal(y, disc.mesh.n_vertices)
    hy = disc.eval_dom(disc.problem.reaction_y, y=y)
    return SpdFactorization(disc.form.stiffness + disc.domain_mass_weighted(hy))


def solve_adjoint(disc: Discretization, y, lam, multipliers,
                  operator: SpdFactorization | None = None) -> FeFunction:
    """Solve the adjoint system at state ``y`` with boundary multipliers."""
    y = _nodal(y, disc.mesh.n_vertices)
    lam = _nodal(lam, disc.mesh.n_boundary)
    op = operator if operator is not None else linearized_operator(disc, y)
    rhs = adjoint_rhs(disc, y, lam, multipliers)
    sol = solve_spd(op.matrix, rhs, factor=op)
    return FeFunction(disc.mesh, sol)


def solve_linearized_state(disc: Discretization, operator: SpdFactorization,
                           u) -> np.ndarray:
    """Solve the linearized state equation ``(K + M[h_y]) y = M_bnd u``."""
    u = _nodal(u, disc.mesh.n_boundary)
    rhs = disc.form.mass_boundary @ disc.embed(u)
    return solve_spd(operator.matrix, rhs, factor=operator)


__all__ = [
    "StateSolveError", "StateSolveReport",
    "solve_state", "state_residual_norm",
    "adjoint_rhs", "linearized_operator", "solve_adjoint",
    "solve_linearized_state",
]
