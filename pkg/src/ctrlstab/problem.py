"""Problem data for the boundary control instance and its admission gates.

An instance bundles the elliptic operator coefficients, the objective
integrands, the monotone state reaction, the mixed control-state constraint
functions, and the reference boundary parameter.  ``ProblemSpec.validate``
enforces the structural assumptions the optimality theory needs; gates that
cannot be proved symbolically are sampled at ``GATE_SAMPLES`` random points
with a fixed seed, so admission is deterministic.  A violated gate raises
``AdmissionError`` naming the assumption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .expr import Expr, differentiate

#: sample count per admission gate
GATE_SAMPLES = 1000

#: sampling box for the state and parameter arguments of the gates
GATE_RANGE = 10.0

_GATE_SEED = 20260815


class AdmissionError(ValueError):
    """An instance violates one of the structural assumptions.

    ``label`` names the violated assumption; the message says where.
    """

    def __init__(self, label: str, message: str):
        self.label = label
        super().__init__(f"assumption {label} violated: {message}")


def _check_vars(e: Expr, allowed: set, label: str, what: str) -> None:
    extra = e.free_vars() - allowed
    if extra:
        raise AdmissionError(
            label, f"{what} may only use {sorted(allowed)}, found "
                   f"{sorted(extra)} in '{e}'")


@dataclass
class ProblemSpec:
    """Data of one control instance.

    Attributes
    ----------
    a11, a12, a22 : Expr in (x1, x2)
        Symmetric diffusion tensor entries (a21 = a12).
    a0 : Expr in (x1, x2)
        Reaction coefficient of the linear operator, >= 0 and not
        identically 0.
    c0 : float
        Declared ellipticity constant: xi' a(x) xi >= c0 |xi|^2.
    obj_domain : Expr in (x1, x2, y)
        Volume objective integrand.
    obj_boundary : Expr in (x1, x2, s, y, lam)
        Boundary objective integrand (excluding the control terms).
    alpha, beta : Expr in (lam,)
        Linear/quadratic control cost weights; beta(lam_ref) >= gamma > 0.
    gamma : float
        Declared lower bound for beta along the reference parameter.
    reaction : Expr in (x1, x2, y)
        Monotone semilinear term h: h(x, 0) = 0 and dh/dy >= 0.
    constraints : tuple of Expr in (x1, x2, s, y, lam)
        Constraint functions g_i; the mixed constraints read
        g_i(x, y, lam) + u <= 0 on the boundary, with dg_i/dy >= 0.
    param_ref : Expr in (x1, x2, s)
        Reference boundary parameter.
    r : float in (2, 4)
        Exponent of the W^{1,r} norm used for state distances.
    """

    a11: Expr
    a12: Expr
    a22: Expr
    a0: Expr
    c0: float
    obj_domain: Expr
    obj_boundary: Expr
    alpha: Expr
    beta: Expr
    gamma: float
    reaction: Expr
    constraints: tuple
    param_ref: Expr
    r: float = 3.0
    name: str = "instance"

    @property
    def m(self) -> int:
        return len(self.constraints)

    # first and second y-derivatives used by the optimality system
    @cached_property
    def obj_domain_y(self) -> Expr:
        return differentiate(self.obj_domain, "y")

    @cached_property
    def obj_domain_yy(self) -> Expr:
        return differentiate(self.obj_domain, "y", 2)

    @cached_property
    def obj_boundary_y(self) -> Expr:
        return differentiate(self.obj_boundary, "y")

    @cached_property
    def obj_boundary_yy(self) -> Expr:
        return differentiate(self.obj_boundary, "y", 2)

    @cached_property
    def reaction_y(self) -> Expr:
        return differentiate(self.reaction, "y")

    @cached_property
    def reaction_yy(self) -> Expr:
        return differentiate(self.reaction, "y", 2)

    @cached_property
    def constraints_y(self) -> tuple:
        return tuple(differentiate(g, "y") for g in self.constraints)

    @cached_property
    def constraints_yy(self) -> tuple:
        return tuple(differentiate(g, "y", 2) for g in self.constraints)

    def validate(self) -> None:
        """Run all admission gates; raise ``AdmissionError`` on failure."""
        if self.m < 2:
            raise AdmissionError("m >= 2",
                                 f"need at least 2 constraints, got {self.m}")
        if not (2.0 < self.r < 4.0):
            raise AdmissionError("r in (2,4)", f"r = {self.r}")
        if not (self.c0 > 0.0):
            raise AdmissionError("(C0)", f"ellipticity constant {self.c0}")
        if not (self.gamma > 0.0):
            raise AdmissionError("(H3)", f"gamma = {self.gamma}")

        xx = {"x1", "x2"}
        for name in ("a11", "a12", "a22", "a0"):
            _check_vars(getattr(self, name), xx, "(C0)",
                        f"operator coefficient {name}")
        _check_vars(self.reaction, xx | {"y"}, "(H4)", "reaction h")
        _check_vars(self.obj_domain, xx | {"y"}, "objective",
                    "domain objective")
        bnd = xx | {"s", "y", "lam"}
        _check_vars(self.obj_boundary, bnd, "objective", "boundary objective")
        for e, nm in ((self.alpha, "alpha"), (self.beta, "beta")):
            _check_vars(e, {"lam"}, "(H3)", f"control cost weight {nm}")
        for i, g in enumerate(self.constraints, start=1):
            _check_vars(g, bnd, "(H4)", f"constraint g_{i}")
        _check_vars(self.param_ref, xx | {"s"}, "parameter",
                    "reference parameter")

        rng = np.random.default_rng(_GATE_SEED)
        # random interior points (uniform on the disk) and boundary points
        t = 2.0 * math.pi * rng.random(GATE_SAMPLES)
        rad = np.sqrt(rng.random(GATE_SAMPLES))
        xd = {"x1": rad * np.cos(t), "x2": rad * np.sin(t)}
        sb = 2.0 * math.pi * rng.random(GATE_SAMPLES)
        xb = {"x1": np.cos(sb), "x2": np.sin(sb), "s": sb}
        yv = GATE_RANGE * (2.0 * rng.random(GATE_SAMPLES) - 1.0)
        lv = GATE_RANGE * (2.0 * rng.random(GATE_SAMPLES) - 1.0)

        def sampled(e, env):
            return np.broadcast_to(
                np.asarray(e.eval(env), dtype=float), (GATE_SAMPLES,))

        # (C0): smallest eigenvalue of the 2x2 tensor at interior samples
        a11 = sampled(self.a11, xd)
        a12 = sampled(self.a12, xd)
        a22 = sampled(self.a22, xd)
        eig_min = 0.5 * (a11 + a22) - np.sqrt(
            (0.5 * (a11 - a22)) ** 2 + a12 ** 2)
        worst = float(np.min(eig_min))
        if worst < self.c0 - 1e-12:
            raise AdmissionError(
                "(C0)", f"sampled ellipticity {worst:.6g} below "
                        f"declared constant {self.c0}")

        a0 = sampled(self.a0, xd)
        if np.min(a0) < -1e-12:
            raise AdmissionError("a_0 >= 0",
                                 f"a_0 reaches {float(np.min(a0)):.6g}")
        if np.max(a0) <= 0.0:
            raise AdmissionError("a_0 != 0",
                                 "a_0 vanishes at all sample points")

        # (H3): beta along the reference parameter stays above gamma
        lam_ref = sampled(self.param_ref, xb)
        beta_ref = sampled(self.beta, {"lam": lam_ref})
        if np.min(beta_ref) < self.gamma - 1e-12:
            raise AdmissionError(
                "(H3)", f"beta(lambda_ref) reaches "
                        f"{float(np.min(beta_ref)):.6g} < gamma = {self.gamma}")

        # (H4): h(x, 0) = 0, dh/dy >= 0, dg_i/dy >= 0
        h0 = sampled(self.reaction, {**xd, "y": np.zeros(GATE_SAMPLES)})
        if np.max(np.abs(h0)) > 1e-12:
            raise AdmissionError(
                "(H4)", f"h(x, 0) reaches {float(np.max(np.abs(h0))):.6g}")
        hy = sampled(self.reaction_y, {**xd, "y": yv})
        if np.min(hy) < -1e-12:
            raise AdmissionError(
                "(H4)", f"dh/dy reaches {float(np.min(hy)):.6g}")
        for i, gy in enumerate(self.constraints_y, start=1):
            gyv = sampled(gy, {**xb, "y": yv, "lam": lv})
            if np.min(gyv) < -1e-12:
                raise AdmissionError(
                    "(H4)", f"dg_{i}/dy reaches {float(np.min(gyv)):.6g}")


__all__ = ["ProblemSpec", "AdmissionError", "GATE_SAMPLES", "GATE_RANGE"]
