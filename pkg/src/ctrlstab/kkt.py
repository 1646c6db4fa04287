"""First- and second-order optimality structures at a candidate point.

A candidate bundles state, control, adjoint, parameter, and one boundary
multiplier per constraint.  First-order checks: equation residuals
(algebraic 2-norms), nodal stationarity/complementarity/feasibility
(max norms), the half-line projection identity for the control, and the
partition margins that quantify which constraint dominates where.  Second
order: sampling of critical directions (linearized states driven by
projected boundary controls) and two estimators for the minimum of the
curvature form on the critical cone, one sampled, one via the reduced
Hessian restricted to the strongly-active equality subspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .fem import BoundaryFunction, Discretization, FeFunction
from .pde import (adjoint_rhs, linearized_operator, solve_linearized_state,
                  state_residual_norm)
from .problem import AdmissionError


@dataclass
class KktPoint:
    """Candidate point: (state, control, adjoint, multipliers) at a
    parameter."""

    state: FeFunction
    control: BoundaryFunction
    adjoint: FeFunction
    multipliers: tuple
    param: BoundaryFunction

    def __post_init__(self):
        mesh = self.state.mesh
        self.multipliers = tuple(self.multipliers)
        fields = [self.control, self.adjoint, self.param, *self.multipliers]
        if any(f.mesh is not mesh for f in fields):
            raise ValueError("all fields must share one mesh")

    @property
    def m(self) -> int:
        return len(self.multipliers)


@dataclass
class KktResiduals:
    """The five first-order residuals.

    ``state``/``adjoint`` are algebraic 2-norms of the discrete equations;
    ``stationarity``/``complementarity``/``feasibility`` are nodal max norms.
    Complementarity includes multiplier negativity: it is
    ``max(|e_i (g_i + u)|, (-e_i)_+)`` over constraints and nodes.
    """

    state: float
    adjoint: float
    stationarity: float
    complementarity: float
    feasibility: float

    @property
    def worst(self) -> float:
        return max(self.state, self.adjoint, self.stationarity,
                   self.complementarity, self.feasibility)

    def to_dict(self) -> dict:
        return {"state": self.state, "adjoint": self.adjoint,
                "stationarity": self.stationarity,
                "complementarity": self.complementarity,
                "feasibility": self.feasibility}


@dataclass
class PartitionH5:
    """Dominance partition of the boundary by the constraint functions.

    ``labels[j]`` is the index of the largest constraint value at node j
    (ties to the lowest index).  ``margins[i, k]`` is ``max over cell i of
    (g_k - g_i)`` (NaN when cell i is empty or k == i); the separation
    margin ``sigma1`` is ``-max`` of all finite off-diagonal margins, so the
    partition assumption holds strictly iff ``sigma1 > 0``.
    """

    labels: np.ndarray
    margins: np.ndarray
    sigma1: float
    counts: np.ndarray = field(default=None)

    def to_dict(self) -> dict:
        return {"sigma1": self.sigma1,
                "counts": [int(c) for c in self.counts]}


def constraint_values(disc: Discretization, y, lam) -> np.ndarray:
    """Nodal values g_i(x, y, lam) on the boundary, shape (m, Nb)."""
    y = y.values if isinstance(y, FeFunction) else np.asarray(y, float)
    lam = lam.values if isinstance(lam, BoundaryFunction) else np.asarray(lam, float)
    return np.stack([disc.eval_node(g, y=y, lam=lam)
                     for g in disc.problem.constraints])


def h5_margins(disc: Discretization, point: KktPoint) -> PartitionH5:
    return partition_at(disc, point.state.values, point.param.values)


def partition_at(disc: Discretization, y, lam) -> PartitionH5:
    """Dominance partition at a given state/parameter (see PartitionH5)."""
    g = constraint_values(disc, y, lam)
    m, nb = g.shape
    labels = np.argmax(g, axis=0)
    margins = np.full((m, m), math.nan)
    counts = np.bincount(labels, minlength=m)
    worst = -math.inf
    for i in range(m):
        cell = labels == i
        if not np.any(cell):
            continue
        for k in range(m):
            if k == i:
                continue
            margins[i, k] = float(np.max(g[k, cell] - g[i, cell]))
            worst = max(worst, margins[i, k])
    sigma1 = -worst if math.isfinite(worst) else math.inf
    return PartitionH5(labels=labels, margins=margins, sigma1=sigma1,
                       counts=counts)


def recover_multipliers(disc: Discretization, y, u, adjoint, lam,
                        partition: PartitionH5) -> tuple:
    """Multipliers from the separation formula: on its own cell each
    constraint carries ``(adjoint - alpha(lam) - beta(lam) u)_+``, elsewhere
    zero."""
    y = y.values if isinstance(y, FeFunction) else np.asarray(y, float)
    u = u.values if isinstance(u, BoundaryFunction) else np.asarray(u, float)
    lam = lam.values if isinstance(lam, BoundaryFunction) else np.asarray(lam, float)
    adj = adjoint.values if isinstance(adjoint, FeFunction) else np.asarray(adjoint, float)
    alpha = disc.eval_node(disc.problem.alpha, lam=lam)
    beta = disc.eval_node(disc.problem.beta, lam=lam)
    w = np.maximum(disc.trace(adj) - alpha - beta * u, 0.0)
    out = []
    for i in range(disc.problem.m):
        vals = np.where(partition.labels == i, w, 0.0)
        out.append(BoundaryFunction(disc.mesh, vals))
    return tuple(out)


def residuals(disc: Discretization, point: KktPoint) -> KktResiduals:
    """The five first-order residuals at ``point``."""
    y = point.state.values
    u = point.control.values
    lam = point.param.values
    adj = point.adjoint.values

    r_state = state_residual_norm(disc, y, u, lam)

    op = linearized_operator(disc, y)
    rhs = adjoint_rhs(disc, y, lam, point.multipliers)
    r_adjoint = float(np.linalg.norm(op.matrix @ adj - rhs))

    alpha = disc.eval_node(disc.problem.alpha, lam=lam)
    beta = disc.eval_node(disc.problem.beta, lam=lam)
    e_sum = np.sum([e.values for e in point.multipliers], axis=0)
    r_stat = float(np.max(np.abs(-disc.trace(adj) + alpha + beta * u + e_sum)))

    g = constraint_values(disc, y, lam)
    r_comp = 0.0
    r_feas = 0.0
    for i, e in enumerate(point.multipliers):
        r_comp = max(r_comp,
                     float(np.max(np.abs(e.values * (g[i] + u)))),
                     float(np.max(-e.values, initial=0.0)))
        r_feas = max(r_feas, float(np.max(g[i] + u, initial=0.0)))
    r_feas = max(r_feas, 0.0)
    return KktResiduals(state=r_state, adjoint=r_adjoint,
                        stationarity=r_stat, complementarity=r_comp,
                        feasibility=r_feas)


def check_beta_floor(disc: Discretization, lam) -> np.ndarray:
    """Nodal beta(lam); rejects the instance when the quadratic weight drops
    to gamma/2 or below at the perturbed parameter."""
    lam = lam.values if isinstance(lam, BoundaryFunction) else np.asarray(lam, float)
    beta = disc.eval_node(disc.problem.beta, lam=lam)
    floor = 0.5 * disc.problem.gamma
    if float(np.min(beta)) <= floor:
        raise AdmissionError(
            "(H3)", f"beta(lambda) reaches {float(np.min(beta)):.6g} "
                    f"<= gamma/2 = {floor:.6g} at a boundary node")
    return beta


def project_halfline(a):
    """Pointwise projection onto the half-line (-inf, 0]: min(a, 0)."""
    return np.minimum(np.asarray(a, float), 0.0)


def projection_identity_gap(disc: Discretization, point: KktPoint) -> float:
    """Max nodal gap in the half-line projection identity
    ``g + u = P_(-inf, 0]((adjoint - alpha)/beta + g)`` with ``g`` the
    pointwise max of the constraint values."""
    lam = point.param.values
    beta = check_beta_floor(disc, lam)
    alpha = disc.eval_node(disc.problem.alpha, lam=lam)
    g = np.max(constraint_values(disc, point.state.values, lam), axis=0)
    w = (disc.trace(point.adjoint.values) - alpha) / beta + g
    lhs = g + point.control.values
    return float(np.max(np.abs(lhs - np.minimum(w, 0.0))))


# ---------------------------------------------------------------------------
# second order
# ---------------------------------------------------------------------------


def quadratic_form(disc: Discretization, point: KktPoint,
                   y_dir: np.ndarray, u_dir: np.ndarray) -> float:
    """Curvature form of the optimality system at ``point``::

        Q(y, u) = int (L_yy + adj h_yy) y^2 dx
                + int_bnd (l_yy y^2 + beta u^2 + sum_i e_i g_iyy y^2) ds.
    """
    p = disc.problem
    y_base = point.state.values
    lam = point.param.values
    y_dir = np.asarray(y_dir, float)
    u_dir = np.asarray(u_dir, float)

    w_dom = disc.eval_dom(p.obj_domain_yy, y=y_base)
    w_dom = w_dom + disc.tri_interp(point.adjoint.values) \
        * disc.eval_dom(p.reaction_yy, y=y_base)
    yq = disc.tri_interp(y_dir)
    q_val = disc.integrate_domain(w_dom * yq ** 2)

    w_bnd = disc.eval_bnd(p.obj_boundary_yy, y=y_base, lam=lam)
    for gyy, e in zip(p.constraints_yy, point.multipliers):
        w_bnd = w_bnd + disc.edge_interp(e.values) \
            * disc.eval_bnd(gyy, y=y_base, lam=lam)
    ytq = disc.edge_interp(disc.trace(y_dir))
    beta_q = disc.eval_bnd(p.beta, lam=lam)
    uq = disc.edge_interp(u_dir)
    q_val += disc.integrate_boundary(w_bnd * ytq ** 2 + beta_q * uq ** 2)
    return float(q_val)


class _ConeGeometry:
    """Active-set data shared by the sampling and subspace estimators."""

    def __init__(self, disc: Discretization, point: KktPoint, tol: float):
        self.disc = disc
        self.point = point
        self.tol = tol
        u = point.control.values
        lam = point.param.values
        self.eps_act = 1e-8 * (1.0 + float(np.max(np.abs(u))))
        g = constraint_values(disc, point.state.values, lam)
        slack = g + u  # <= 0 feasible
        self.active = slack >= -self.eps_act  # (m, Nb)
        mult = np.stack([e.values for e in point.multipliers])
        self.mult = mult
        self.mult_scale = float(np.max(mult, initial=0.0))
        self.strong = self.active & (mult > self.eps_act)
        self.gy = np.stack([disc.eval_node(gy, y=point.state.values, lam=lam)
                            for gy in disc.problem.constraints_y])
        self.operator = linearized_operator(disc, point.state.values)
        self._t_mat = None
        self._z_mat = None

    @property
    def t_mat(self) -> np.ndarray:
        """Dense control-to-linearized-state map, (V, Nb)."""
        if self._t_mat is None:
            self._t_mat = _control_to_state_matrix(self.disc, self.operator)
        return self._t_mat

    @property
    def z_mat(self) -> np.ndarray:
        """Orthonormal basis of the strong-equality subspace: controls u
        with ``g_y (T u) + u = 0`` at every strongly active node."""
        if self._z_mat is None:
            nb = self.disc.mesh.n_boundary
            tb = self.t_mat[self.disc.mesh.boundary_vertices, :]
            rows = []
            for i in range(self.disc.problem.m):
                for j in np.flatnonzero(self.strong[i]):
                    row = self.gy[i, j] * tb[j, :]
                    row[j] += 1.0
                    rows.append(row)
            if rows:
                c_mat = np.vstack(rows)
                _, sv, vt = np.linalg.svd(c_mat, full_matrices=True)
                rank = int(np.sum(sv > 1e-12 * (sv[0] if len(sv) else 1.0)))
                self._z_mat = vt[rank:].T  # (Nb, nz)
            else:
                self._z_mat = np.eye(nb)
        return self._z_mat

    def project(self, u: np.ndarray, sweeps: int = 30) -> tuple:
        """Project a control seed into the discrete critical cone.

        The strong equalities are enforced exactly by restricting to their
        nullspace basis; the remaining weakly active inequalities are handled
        by alternating the cap ``u <= -g_y y`` with re-projection onto the
        subspace.  Returns the control and its linearized state.
        """
        disc = self.disc
        z = self.z_mat
        if z.shape[1] == 0:
            nv = disc.mesh.n_vertices
            return np.zeros(nv), np.zeros_like(u)
        u = z @ (z.T @ u)
        y = self.t_mat @ u
        weak = self.active & ~self.strong
        if weak.any():
            for _ in range(sweeps):
                yb = disc.trace(y)
                bound = np.min(np.where(weak, -self.gy * yb, math.inf),
                               axis=0)
                u_new = np.minimum(u, bound)
                if np.max(np.abs(u_new - u)) <= 1e-14 * (1.0 + np.max(np.abs(u))):
                    break
                u = z @ (z.T @ u_new)
                y = self.t_mat @ u
        return y, u

    def admissible(self, y: np.ndarray, u: np.ndarray,
                   scale: float) -> bool:
        """Check (iii) on active nodes and first-order criticality.

        Criticality is the nodal complementarity product: each multiplier
        weight must sit where the linearized constraint is tight.  (The
        quadrature pairing <grad J, d> is not a valid substitute here: on
        edges joining a strongly active node to an inactive one it picks up
        an interpolation cross term of order h^2 that never vanishes.)
        """
        yb = self.disc.trace(y)
        lin = self.gy * yb + u
        viol = np.where(self.active, lin, -math.inf)
        if float(np.max(viol, initial=-math.inf)) > self.tol * scale:
            return False
        defect = float(np.max(np.abs(self.mult * lin),
                              initial=0.0))
        return defect <= self.tol * scale * (1.0 + self.mult_scale)


def critical_direction_sample(disc: Discretization, point: KktPoint,
                              n: int, rng: np.random.Generator,
                              tol: float = 1e-8) -> list:
    """Sample up to ``n`` unit directions from the critical cone.

    Each direction pairs a boundary control with its linearized state;
    normalization is ``||u||_L2bnd + ||y||_L2dom = 1``.  Directions that
    fail the cone checks after projection (and after retrying the flipped
    seed) are dropped, so fewer than ``n`` may return; an empty list means
    the cone is numerically trivial.
    """
    cone = _ConeGeometry(disc, point, tol)
    return _sample_directions(cone, n, rng)


def _sample_directions(cone: _ConeGeometry, n: int,
                       rng: np.random.Generator) -> list:
    out = []
    for _ in range(n):
        seed = rng.standard_normal(cone.disc.mesh.n_boundary)
        direction = _finish_direction(cone, seed)
        if direction is None:
            direction = _finish_direction(cone, -seed)
        if direction is not None:
            out.append(direction)
    return out


def _finish_direction(cone: _ConeGeometry, seed: np.ndarray):
    disc = cone.disc
    y, u = cone.project(seed.copy())
    size = disc.l2_boundary(u) + disc.l2_domain(y)
    if size <= 1e-12 * (1.0 + float(np.max(np.abs(seed)))):
        return None
    if not cone.admissible(y, u, size):
        return None
    y = y / size
    u = u / size
    return (FeFunction(disc.mesh, y), BoundaryFunction(disc.mesh, u))


@dataclass
class SscReport:
    """Second-order check summary.

    ``min_rayleigh``: smallest curvature value over the sampled unit
    directions (inf when the cone is numerically trivial).
    ``subspace_min_eig``: smallest eigenvalue of the reduced Hessian on the
    strongly-active equality subspace, in the metric
    ``||u||^2 + ||y(u)||^2``.  ``positive`` holds when both estimators are
    strictly positive.
    """

    min_rayleigh: float
    subspace_min_eig: float
    n_samples: int
    n_strong: int
    positive: bool

    def to_dict(self) -> dict:
        def safe(x):
            return x if math.isfinite(x) else None
        return {"min_rayleigh": safe(self.min_rayleigh),
                "subspace_min_eig": safe(self.subspace_min_eig),
                "n_samples": self.n_samples,
                "n_strong": self.n_strong,
                "positive": self.positive}


def _control_to_state_matrix(disc: Discretization, operator) -> np.ndarray:
    nb = disc.mesh.n_boundary
    rhs = np.zeros((disc.mesh.n_vertices, nb))
    cols = disc.form.mass_boundary[:, disc.mesh.boundary_vertices].toarray()
    rhs[:, :] = cols
    return operator.solve(rhs)


def check_ssc(disc: Discretization, point: KktPoint, n_samples: int = 200,
              rng: np.random.Generator | None = None,
              tol: float = 1e-8) -> SscReport:
    """Estimate the minimum of the curvature form over the critical cone.

    Two estimators: the sampled minimum over ``n_samples`` projected random
    directions (enriched with the subspace eigen-direction when that
    direction is itself admissible), and the smallest reduced-Hessian
    eigenvalue on the strongly-active equality subspace via a shifted
    inverse power iteration.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    cone = _ConeGeometry(disc, point, tol)
    dirs = _sample_directions(cone, n_samples, rng)
    values = [quadratic_form(disc, point, y.values, u.values)
              for y, u in dirs]

    # reduced Hessian on the strongly-active equality subspace
    t_mat = cone.t_mat
    z_mat = cone.z_mat
    n_strong = int(np.sum(cone.strong))

    if z_mat.shape[1] == 0:
        sub_min = math.inf
    else:
        p = disc.problem
        lam = point.param.values
        y_base = point.state.values
        w_dom = disc.eval_dom(p.obj_domain_yy, y=y_base) \
            + disc.tri_interp(point.adjoint.values) \
            * disc.eval_dom(p.reaction_yy, y=y_base)
        a_dom = disc.domain_mass_weighted(w_dom)
        w_bnd = disc.eval_bnd(p.obj_boundary_yy, y=y_base, lam=lam)
        for gyy, e in zip(p.constraints_yy, point.multipliers):
            w_bnd = w_bnd + disc.edge_interp(e.values) \
                * disc.eval_bnd(gyy, y=y_base, lam=lam)
        b_y = disc.boundary_mass_weighted(w_bnd)
        b_u = disc.boundary_mass_weighted(
            disc.eval_bnd(p.beta, lam=lam), boundary_numbering=True)
        hess = t_mat.T @ ((a_dom + b_y) @ t_mat) + b_u.toarray()
        metric = disc.form.mass_boundary_bb.toarray() \
            + t_mat.T @ (disc.form.mass_domain @ t_mat)

        a_red = z_mat.T @ hess @ z_mat
        b_red = z_mat.T @ metric @ z_mat
        a_red = 0.5 * (a_red + a_red.T)
        b_red = 0.5 * (b_red + b_red.T)
        chol_b = np.linalg.cholesky(b_red)
        half = scipy.linalg.solve_triangular(chol_b, a_red, lower=True)
        c_sym = scipy.linalg.solve_triangular(chol_b, half.T, lower=True).T
        c_sym = 0.5 * (c_sym + c_sym.T)

        nz = c_sym.shape[0]
        # Gershgorin lower bound keeps the shift strictly below the smallest
        # eigenvalue, so the iteration cannot lock onto an interior one.
        shift = float(np.min(np.diag(c_sym)
                             - (np.sum(np.abs(c_sym), axis=1)
                                - np.abs(np.diag(c_sym))))) - 1.0
        chol_s = scipy.linalg.cho_factor(
            c_sym - shift * np.eye(nz), lower=True)
        x = np.ones(nz)
        x[int(np.argmin(np.diag(c_sym)))] += 1.0
        x /= np.linalg.norm(x)
        rq = float(x @ c_sym @ x)
        for it in range(50):
            x = scipy.linalg.cho_solve(chol_s, x)
            x /= np.linalg.norm(x)
            cx = c_sym @ x
            rq = float(x @ cx)
            res = float(np.linalg.norm(cx - rq * x))
            if res <= 1e-13 * (1.0 + abs(rq)):
                break
            if it == 24:
                # once aligned, move the shift to the certified interval edge
                new_shift = rq - res - 1e-8 * (1.0 + abs(rq))
                if new_shift > shift:
                    try:
                        chol_s = scipy.linalg.cho_factor(
                            c_sym - new_shift * np.eye(nz), lower=True)
                        shift = new_shift
                    except np.linalg.LinAlgError:
                        pass
        sub_min = rq

        # the eigen-direction is a legal sample whenever it lies in the cone
        u_eig = z_mat @ (scipy.linalg.solve_triangular(
            chol_b, x, lower=True, trans="T"))
        y_eig = t_mat @ u_eig
        size = disc.l2_boundary(u_eig) + disc.l2_domain(y_eig)
        if size > 1e-12 and cone.admissible(y_eig, u_eig, size):
            values.append(quadratic_form(disc, point, y_eig / size,
                                         u_eig / size))
            dirs.append((FeFunction(disc.mesh, y_eig / size),
                         BoundaryFunction(disc.mesh, u_eig / size)))

    min_rayleigh = min(values) if values else math.inf
    positive = (min_rayleigh > 0.0) and (sub_min > 0.0)
    return SscReport(min_rayleigh=float(min_rayleigh),
                     subspace_min_eig=float(sub_min),
                     n_samples=len(dirs), n_strong=n_strong,
                     positive=positive)


__all__ = [
    "KktPoint", "KktResiduals", "PartitionH5", "SscReport",
    "constraint_values", "partition_at", "h5_margins",
    "recover_multipliers", "residuals", "check_beta_floor",
    "projection_identity_gap", "quadratic_form",
    "critical_direction_sample", "check_ssc",
]
