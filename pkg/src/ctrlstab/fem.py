"""P1 finite elements on a disk triangulation.

Fixed quadrature rules (exact for the P1 products they integrate):

* interior: 3-point rule at the barycentric permutations of (2/3, 1/6, 1/6),
  weight area/3 each (exact through quadratic polynomials);
* boundary: 2-point Gauss per edge (exact through cubics).

The module provides nodal field containers, weighted mass/stiffness
assembly, discrete norms, and a sparse symmetric-positive-definite solver
(reverse Cuthill-McKee reordering + banded Cholesky, with a Jacobi
preconditioned conjugate-gradient fallback for degenerate bandwidth).
``Discretization`` caches everything tied to one (problem, mesh) pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee
from scipy.sparse.linalg import cg as _sparse_cg

from .geometry import Mesh
from .problem import AdmissionError, ProblemSpec

#: interior quadrature: barycentric coordinates (rows: points, cols: nodes)
TRI_BASIS = np.array([[2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
                      [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
                      [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]])

#: boundary quadrature parameters on [0, 1] (2-point Gauss)
EDGE_T = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])

#: boundary basis values (rows: points, cols: edge endpoints)
EDGE_BASIS = np.column_stack([1.0 - EDGE_T, EDGE_T])


class FemError(RuntimeError):
    """Numerical failure in assembly or linear algebra."""


class NotSpdError(FemError):
    """The matrix handed to the Cholesky solver is not symmetric positive
    definite."""


def _as_values(values, n, what):
    v = np.asarray(values, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{what} needs shape ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contains non-finite entries")
    return v


@dataclass
class FeFunction:
    """Nodal P1 field on the whole mesh (one value per vertex)."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_values(self.values, self.mesh.n_vertices,
                                 "FeFunction values")

    def copy(self) -> "FeFunction":
        return FeFunction(self.mesh, self.values.copy())


@dataclass
class BoundaryFunction:
    """Nodal field on the boundary cycle (aligned with
    ``mesh.boundary_vertices``)."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = _as_values(self.values, self.mesh.n_boundary,
                                 "BoundaryFunction values")

    def copy(self) -> "BoundaryFunction":
        return BoundaryFunction(self.mesh, self.values.copy())


# ---------------------------------------------------------------------------
# mesh-derived quadrature geometry
# ---------------------------------------------------------------------------


class _MeshTables:
    """Per-mesh geometry: P1 gradients, quadrature points and weights."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        tris = mesh.triangles
        p = mesh.vertices[tris]  # (T, 3, 2)

        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        self.areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

        # grad phi_i = (y_{i+1} - y_{i+2}, x_{i+2} - x_{i+1}) / (2 area)
        grads = np.empty((len(tris), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            grads[:, i, 0] = p[:, j, 1] - p[:, k, 1]
            grads[:, i, 1] = p[:, k, 0] - p[:, j, 0]
        grads /= (2.0 * self.areas)[:, None, None]
        self.grads = grads

        # interior quadrature points (T, 3, 2) and weights (T, 3)
        self.qp_dom = np.einsum("qn,tnd->tqd", TRI_BASIS, p)
        self.qw_dom = np.repeat(self.areas[:, None] / 3.0, 3, axis=1)

        # boundary quadrature
        ep = mesh.vertices[mesh.boundary_edges]  # (Nb, 2, 2)
        self.edge_len = np.linalg.norm(ep[:, 1] - ep[:, 0], axis=1)
        self.qp_bnd = np.einsum("qn,end->eqd", EDGE_BASIS, ep)
        self.qw_bnd = np.repeat(self.edge_len[:, None] / 2.0, 2, axis=1)

        # arc parameter at edge quadrature points; the closing edge wraps
        s0 = mesh.boundary_s
        s1 = np.roll(s0, -1)
        s1[-1] = 2.0 * math.pi
        self.qs_bnd = np.outer(1.0 - EDGE_T, s0).T + np.outer(EDGE_T, s1).T


_TABLE_CACHE: dict = {}


def _tables(mesh: Mesh) -> _MeshTables:
    key = id(mesh)
    hit = _TABLE_CACHE.get(key)
    if hit is None or hit.mesh is not mesh:
        hit = _MeshTables(mesh)
        _TABLE_CACHE[key] = hit
        if len(_TABLE_CACHE) > 32:
            _TABLE_CACHE.pop(next(iter(_TABLE_CACHE)))
    return hit


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def norm(f, kind: str, r: float = 3.0) -> float:
    """Discrete norm of a nodal field.

    ``kind`` is one of ``"l2"``, ``"linf"``, ``"w1r"``.  The measure follows
    the field type: domain for ``FeFunction``, boundary for
    ``BoundaryFunction``.  ``linf`` is the max nodal magnitude; ``w1r`` (domain
    fields only) is ``(sum_T int_T |grad f|^r + |f|^r)^(1/r)`` with the
    gradient constant per triangle.
    """
    if kind == "linf":
        return float(np.max(np.abs(f.values))) if len(f.values) else 0.0
    if isinstance(f, FeFunction):
        t = _tables(f.mesh)
        vals = f.values[f.mesh.triangles] @ TRI_BASIS.T  # (T, 3)
        if kind == "l2":
            return float(np.sqrt(np.sum(t.qw_dom * vals ** 2)))
        if kind == "w1r":
            if not (2.0 < r < 4.0):
                raise ValueError(f"W^(1,r) exponent must lie in (2, 4), got {r}")
            g = np.einsum("tn,tnd->td", f.values[f.mesh.triangles], t.grads)
            gnorm = np.hypot(g[:, 0], g[:, 1])
            total = np.sum(t.areas * gnorm ** r) + np.sum(t.qw_dom * np.abs(vals) ** r)
            return float(total ** (1.0 / r))
    elif isinstance(f, BoundaryFunction):
        if kind == "l2":
            t = _tables(f.mesh)
            idx = np.arange(f.mesh.n_boundary)
            ev = np.column_stack([f.values[idx],
                                  f.values[(idx + 1) % f.mesh.n_boundary]])
            vals = ev @ EDGE_BASIS.T  # (Nb, 2)
            return float(np.sqrt(np.sum(t.qw_bnd * vals ** 2)))
        if kind == "w1r":
            raise ValueError("w1r is a domain norm; got a boundary field")
    else:
        raise TypeError(f"expected FeFunction or BoundaryFunction, got {type(f)}")
    raise ValueError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# SPD solver
# ---------------------------------------------------------------------------

#: above this (permuted) bandwidth the banded factorization is abandoned for
#: preconditioned CG
_BAND_LIMIT = 2000


class SpdFactorization:
    """Cholesky factorization of a sparse SPD matrix.

    Reverse Cuthill-McKee reordering keeps the band thin on mesh matrices;
    the band is then factorized with LAPACK.  A non-positive pivot surfaces
    as ``NotSpdError``.
    """

    def __init__(self, matrix):
        a = sp.csr_matrix(matrix)
        n = a.shape[0]
        if a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        asym = abs(a - a.T)
        scale = max(1.0, float(np.max(np.abs(a.data))) if a.nnz else 0.0)
        if asym.nnz and asym.data.max() > 1e-12 * scale:
            raise NotSpdError("matrix is not symmetric")
        self.n = n
        self.matrix = a

        perm = np.asarray(reverse_cuthill_mckee(a, symmetric_mode=True))
        ap = a[perm, :][:, perm].tocoo()
        bw = int(np.max(np.abs(ap.row - ap.col))) if ap.nnz else 0
        self._perm = perm
        self._cg = bw > _BAND_LIMIT
        if self._cg:
            d = a.diagonal()
            if np.any(d <= 0.0):
                raise NotSpdError("non-positive diagonal entry")
            self._diag = d
            return

        ab = np.zeros((bw + 1, n))
        up = ap.row <= ap.col
        ab[bw + ap.row[up] - ap.col[up], ap.col[up]] = ap.data[up]
        try:
            self._chol = scipy.linalg.cholesky_banded(ab, lower=False)
        except scipy.linalg.LinAlgError as exc:
            raise NotSpdError(f"matrix is not positive definite: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self._cg:
            if b.ndim == 2:
                return np.column_stack([self.solve(col) for col in b.T])
            x, info = _sparse_cg(self.matrix, b, rtol=1e-13, atol=0.0,
                                 M=sp.diags(1.0 / self._diag), maxiter=20 * self.n)
            if info != 0:
                raise NotSpdError(f"conjugate gradient failed (info={info})")
            return x
        z = scipy.linalg.cho_solve_banded((self._chol, False), b[self._perm])
        x = np.empty_like(z)
        x[self._perm] = z
        return x


def solve_spd(matrix, b: np.ndarray, factor: SpdFactorization | None = None
              ) -> np.ndarray:
    """Solve ``matrix @ x = b`` for SPD ``matrix``.

    One step of iterative refinement secures the residual bound
    ``||b - K x||_2 <= 1e-10 (1 + ||b||_2)``; failure to reach it raises
    ``FemError``.
    """
    f = factor if factor is not None else SpdFactorization(matrix)
    b = np.asarray(b, dtype=float)
    x = f.solve(b)
    tol = 1e-10 * (1.0 + float(np.linalg.norm(b)))
    for _ in range(2):
        res = b - f.matrix @ x
        if float(np.linalg.norm(res)) <= tol:
            return x
        x = x + f.solve(res)
    res = float(np.linalg.norm(b - f.matrix @ x))
    if res > tol:
        raise FemError(f"linear solve residual {res:.3e} exceeds {tol:.3e}")
    return x


# ---------------------------------------------------------------------------
# assembled operators
# ---------------------------------------------------------------------------


@dataclass
class EllipticForm:
    """Assembled matrices of the linear part of the state operator."""

    stiffness: sp.csr_matrix       # diffusion + a0 reaction, (V, V)
    mass_domain: sp.csr_matrix     # (V, V)
    mass_boundary: sp.csr_matrix   # (V, V), nonzeros on boundary blocks
    mass_boundary_bb: sp.csr_matrix  # (Nb, Nb), boundary numbering


class Discretization:
    """Everything tied to one (problem, mesh) pair.

    Holds the quadrature tables, the assembled :class:`EllipticForm`, and
    evaluation helpers that build numpy environments for the problem's
    expressions at interior quadrature points, boundary quadrature points,
    and boundary nodes.
    """

    def __init__(self, problem: ProblemSpec, mesh: Mesh, validate: bool = True):
        if validate:
            problem.validate()
        self.problem = problem
        self.mesh = mesh
        t = _tables(mesh)
        self.tables = t

        bv = mesh.boundary_vertices
        self._env_dom = {"x1": t.qp_dom[:, :, 0], "x2": t.qp_dom[:, :, 1]}
        self._env_bnd = {"x1": t.qp_bnd[:, :, 0], "x2": t.qp_bnd[:, :, 1],
                         "s": t.qs_bnd}
        self._env_node = {"x1": mesh.vertices[bv, 0],
                          "x2": mesh.vertices[bv, 1],
                          "s": mesh.boundary_s}
        nb = mesh.n_boundary
        self._edge_pos = np.column_stack([np.arange(nb), (np.arange(nb) + 1) % nb])

        self.form = self._assemble()

    # -- expression environments --------------------------------------------

    def eval_dom(self, e, y: np.ndarray | None = None) -> np.ndarray:
        """Evaluate ``e`` at interior quadrature points, (T, 3)."""
        env = dict(self._env_dom)
        if y is not None:
            env["y"] = self.tri_interp(y)
        out = np.asarray(e.eval(env), dtype=float)
        return np.broadcast_to(out, self.tables.qw_dom.shape)

    def eval_bnd(self, e, y=None, lam=None, u=None) -> np.ndarray:
        """Evaluate ``e`` at boundary quadrature points, (Nb, 2).

        ``y`` is a full nodal array (traced), ``lam``/``u`` boundary nodal.
        """
        env = dict(self._env_bnd)
        if y is not None:
            env["y"] = self.edge_interp(self.trace(y))
        if lam is not None:
            env["lam"] = self.edge_interp(lam)
        if u is not None:
            env["u"] = self.edge_interp(u)
        out = np.asarray(e.eval(env), dtype=float)
        return np.broadcast_to(out, self.tables.qw_bnd.shape)

    def eval_node(self, e, y=None, lam=None) -> np.ndarray:
        """Evaluate ``e`` at boundary nodes, (Nb,)."""
        env = dict(self._env_node)
        if y is not None:
            env["y"] = self.trace(y)
        if lam is not None:
            env["lam"] = np.asarray(lam, dtype=float)
        out = np.asarray(e.eval(env), dtype=float)
        return np.broadcast_to(out, (self.mesh.n_boundary,))

    def tri_interp(self, v: np.ndarray) -> np.ndarray:
        """Nodal (V,) -> values at interior quadrature points (T, 3)."""
        return v[self.mesh.triangles] @ TRI_BASIS.T

    def edge_interp(self, w: np.ndarray) -> np.ndarray:
        """Boundary nodal (Nb,) -> values at edge quadrature points (Nb, 2)."""
        return np.asarray(w, float)[self._edge_pos] @ EDGE_BASIS.T

    def trace(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, float)[self.mesh.boundary_vertices]

    def embed(self, w: np.ndarray) -> np.ndarray:
        """Boundary nodal (Nb,) -> full nodal (V,) zero-extended."""
        full = np.zeros(self.mesh.n_vertices)
        full[self.mesh.boundary_vertices] = w
        return full

    def param_reference(self) -> BoundaryFunction:
        """Reference parameter evaluated at the boundary nodes."""
        return BoundaryFunction(self.mesh,
                                self.eval_node(self.problem.param_ref))

    # -- assembly -------------------------------------------------------------

    def _assemble(self) -> EllipticForm:
        t = self.tables
        a11 = self.eval_dom(self.problem.a11)
        a12 = self.eval_dom(self.problem.a12)
        a22 = self.eval_dom(self.problem.a22)
        a0 = self.eval_dom(self.problem.a0)

        eig_min = 0.5 * (a11 + a22) - np.sqrt(
            (0.5 * (a11 - a22)) ** 2 + a12 ** 2)
        worst = float(np.min(eig_min))
        if worst < self.problem.c0 - 1e-12:
            raise AdmissionError(
                "(C0)", f"tensor eigenvalue {worst:.6g} below declared "
                        f"constant {self.problem.c0} at a quadrature point")
        if float(np.min(a0)) < -1e-12:
            raise AdmissionError("a_0 >= 0", "negative reaction coefficient "
                                             "at a quadrature point")

        i11 = np.sum(t.qw_dom * a11, axis=1)
        i12 = np.sum(t.qw_dom * a12, axis=1)
        i22 = np.sum(t.qw_dom * a22, axis=1)
        gx = t.grads[:, :, 0]
        gy = t.grads[:, :, 1]
        elem = (np.einsum("t,ta,tb->tab", i11, gx, gx)
                + np.einsum("t,ta,tb->tab", i12, gx, gy)
                + np.einsum("t,ta,tb->tab", i12, gy, gx)
                + np.einsum("t,ta,tb->tab", i22, gy, gy))
        elem += np.einsum("tq,qa,qb->tab", t.qw_dom * a0, TRI_BASIS, TRI_BASIS)
        # duplicate summation order in the scatter perturbs symmetry at
        # machine level; the averaged form is symmetric bit for bit
        stiffness = self._scatter_domain(elem)
        stiffness = 0.5 * (stiffness + stiffness.T).tocsr()

        mass_elem = np.einsum("tq,qa,qb->tab",
                              t.qw_dom, TRI_BASIS, TRI_BASIS)
        mass_domain = self._scatter_domain(mass_elem)

        edge_elem = np.einsum("eq,qa,qb->eab",
                              t.qw_bnd, EDGE_BASIS, EDGE_BASIS)
        mass_boundary = self._scatter_boundary(edge_elem,
                                               self.mesh.boundary_edges,
                                               self.mesh.n_vertices)
        mass_boundary_bb = self._scatter_boundary(edge_elem, self._edge_pos,
                                                  self.mesh.n_boundary)
        return EllipticForm(stiffness, mass_domain, mass_boundary,
                            mass_boundary_bb)

    def _scatter_domain(self, elem: np.ndarray) -> sp.csr_matrix:
        tris = self.mesh.triangles
        rows = np.repeat(tris, 3, axis=1).ravel()
        cols = np.tile(tris, (1, 3)).ravel()
        n = self.mesh.n_vertices
        return sp.coo_matrix((elem.ravel(), (rows, cols)),
                             shape=(n, n)).tocsr()

    @staticmethod
    def _scatter_boundary(elem: np.ndarray, edges: np.ndarray,
                          n: int) -> sp.csr_matrix:
        rows = np.repeat(edges, 2, axis=1).ravel()
        cols = np.tile(edges, (1, 2)).ravel()
        return sp.coo_matrix((elem.ravel(), (rows, cols)),
                             shape=(n, n)).tocsr()

    def domain_mass_weighted(self, w_qp: np.ndarray) -> sp.csr_matrix:
        """Assemble ``int w phi_a phi_b dx`` from weight values at interior
        quadrature points."""
        elem = np.einsum("tq,qa,qb->tab", self.tables.qw_dom * w_qp,
                         TRI_BASIS, TRI_BASIS)
        return self._scatter_domain(elem)

    def boundary_mass_weighted(self, w_qp: np.ndarray,
                               boundary_numbering: bool = False) -> sp.csr_matrix:
        """Assemble ``int_boundary w phi_a phi_b ds``."""
        elem = np.einsum("eq,qa,qb->eab", self.tables.qw_bnd * w_qp,
                         EDGE_BASIS, EDGE_BASIS)
        if boundary_numbering:
            return self._scatter_boundary(elem, self._edge_pos,
                                          self.mesh.n_boundary)
        return self._scatter_boundary(elem, self.mesh.boundary_edges,
                                      self.mesh.n_vertices)

    def domain_load(self, f_qp: np.ndarray) -> np.ndarray:
        """Assemble ``int f phi_a dx`` into a full nodal vector (V,)."""
        contrib = np.einsum("tq,qa->ta", self.tables.qw_dom * f_qp, TRI_BASIS)
        out = np.zeros(self.mesh.n_vertices)
        np.add.at(out, self.mesh.triangles, contrib)
        return out

    def boundary_load(self, f_qp: np.ndarray) -> np.ndarray:
        """Assemble ``int_boundary f phi_a ds`` into a full nodal vector."""
        contrib = np.einsum("eq,qa->ea", self.tables.qw_bnd * f_qp, EDGE_BASIS)
        out = np.zeros(self.mesh.n_vertices)
        np.add.at(out, self.mesh.boundary_edges, contrib)
        return out

    def integrate_domain(self, f_qp: np.ndarray) -> float:
        return float(np.sum(self.tables.qw_dom * f_qp))

    def integrate_boundary(self, f_qp: np.ndarray) -> float:
        return float(np.sum(self.tables.qw_bnd * f_qp))

    def l2_boundary(self, w: np.ndarray) -> float:
        """L2 boundary norm of a boundary nodal array."""
        vals = self.edge_interp(w)
        return float(np.sqrt(np.sum(self.tables.qw_bnd * vals ** 2)))

    def l2_domain(self, v: np.ndarray) -> float:
        vals = self.tri_interp(np.asarray(v, float))
        return float(np.sqrt(np.sum(self.tables.qw_dom * vals ** 2)))


__all__ = [
    "TRI_BASIS", "EDGE_T", "EDGE_BASIS",
    "FemError", "NotSpdError",
    "FeFunction", "BoundaryFunction",
    "norm", "SpdFactorization", "solve_spd",
    "EllipticForm", "Discretization",
]
