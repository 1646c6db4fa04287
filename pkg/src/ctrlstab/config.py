"""INI instance files.

Sections and keys::

    [domain]      n_boundary, refinement, r
    [operator]    a11, a12, a22, a0, c0
    [cost]        L, ell, alpha, beta, gamma
    [state]       h
    [constraints] g_1 ... g_m           (consecutive indices from 1)
    [parameter]   lambda_bar
    [solver]      max_outer, tol, theta, adaptive, theta_min,
                  newton_tol, newton_max_iter          (all optional)
    [sweep]       delta, t, seed, warm_start, ssc_samples   (optional section)

Coefficient values are expressions in the grammar of :mod:`ctrlstab.expr`;
``t`` is a whitespace- or comma-separated list of step sizes.  The sweep
direction ``delta`` is normalized to sup-norm 1 at the mesh nodes.  Every
violation raises ``ConfigError`` naming the section and key.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from .expr import Expr, ExprError, parse
from .fem import BoundaryFunction, Discretization
from .geometry import Mesh, make_disk_mesh
from .problem import ProblemSpec
from .solver import SolveOptions
from .stability import SweepPlan


class ConfigError(ValueError):
    """Malformed or inconsistent instance file."""


@dataclass
class SweepConfig:
    delta: Expr
    t_values: np.ndarray
    seed: int
    warm_start: bool
    ssc_samples: int


@dataclass
class InstanceConfig:
    """Parsed instance: problem data, mesh request, solver options, and the
    optional sweep block."""

    problem: ProblemSpec
    n_boundary: int
    refinement: int
    solve_options: SolveOptions
    sweep: SweepConfig | None
    path: str


def _get(cp: configparser.ConfigParser, section: str, key: str,
         fallback=None, required: bool = True) -> str:
    if not cp.has_section(section):
        raise ConfigError(f"missing section [{section}]")
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"missing key '{key}' in [{section}]")
        return fallback
    return cp.get(section, key)


def _expr(cp, section, key, fallback=None) -> Expr:
    raw = _get(cp, section, key, required=fallback is None)
    if raw is None:
        raw = fallback
    try:
        return parse(raw)
    except ExprError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _number(cp, section, key, cast, fallback=None):
    raw = _get(cp, section, key, required=fallback is None)
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _bool(cp, section, key, fallback: bool) -> bool:
    raw = _get(cp, section, key, required=False)
    if raw is None:
        return fallback
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")


def parse_instance(path) -> InstanceConfig:
    """Read and validate an instance file (see module docstring)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                   interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    n_boundary = _number(cp, "domain", "n_boundary", int)
    refinement = _number(cp, "domain", "refinement", int, fallback=0)
    r_exp = _number(cp, "domain", "r", float, fallback=3.0)
    if n_boundary < 8:
        raise ConfigError("[domain] n_boundary: must be >= 8")
    if refinement < 0:
        raise ConfigError("[domain] refinement: must be >= 0")

    constraints = []
    if not cp.has_section("constraints"):
        raise ConfigError("missing section [constraints]")
    index = 1
    while cp.has_option("constraints", f"g_{index}"):
        constraints.append(_expr(cp, "constraints", f"g_{index}"))
        index += 1
    extra = set(cp.options("constraints")) - {f"g_{i}"
                                              for i in range(1, index)}
    if extra:
        raise ConfigError(
            f"[constraints]: keys must be g_1..g_m with consecutive "
            f"indices; unexpected {sorted(extra)}")
    if len(constraints) < 2:
        raise ConfigError("[constraints]: need at least g_1 and g_2")

    c0_key = "c0" if cp.has_option("operator", "c0") else "c_0"
    problem = ProblemSpec(
        a11=_expr(cp, "operator", "a11"),
        a12=_expr(cp, "operator", "a12"),
        a22=_expr(cp, "operator", "a22"),
        a0=_expr(cp, "operator", "a0"),
        c0=_number(cp, "operator", c0_key, float),
        obj_domain=_expr(cp, "cost", "L"),
        obj_boundary=_expr(cp, "cost", "ell"),
        alpha=_expr(cp, "cost", "alpha"),
        beta=_expr(cp, "cost", "beta"),
        gamma=_number(cp, "cost", "gamma", float),
        reaction=_expr(cp, "state", "h"),
        constraints=tuple(constraints),
        param_ref=_expr(cp, "parameter", "lambda_bar"),
        r=r_exp,
        name=str(path),
    )

    options = SolveOptions(
        max_outer=_number(cp, "solver", "max_outer", int, fallback=200),
        tol=_number(cp, "solver", "tol", float, fallback=1e-9),
        theta=_number(cp, "solver", "theta", float, fallback=0.5),
        adaptive=_bool(cp, "solver", "adaptive", True),
        theta_min=_number(cp, "solver", "theta_min", float, fallback=1e-3),
        newton_tol=_number(cp, "solver", "newton_tol", float, fallback=1e-11),
        newton_max_iter=_number(cp, "solver", "newton_max_iter", int,
                                fallback=50),
    ) if cp.has_section("solver") else SolveOptions()

    sweep = None
    if cp.has_section("sweep"):
        t_raw = _get(cp, "sweep", "t").replace(",", " ").split()
        try:
            t_values = np.array([float(v) for v in t_raw])
        except ValueError as exc:
            raise ConfigError(f"[sweep] t: {exc}") from exc
        if len(t_values) < 4:
            raise ConfigError("[sweep] t: need at least 4 step sizes")
        if np.any(t_values <= 0) or np.any(np.diff(t_values) <= 0):
            raise ConfigError("[sweep] t: must be positive and strictly "
                              "increasing")
        delta = _expr(cp, "sweep", "delta")
        bad = delta.free_vars() - {"x1", "x2", "s"}
        if bad:
            raise ConfigError(f"[sweep] delta: may only use x1, x2, s; "
                              f"found {sorted(bad)}")
        sweep = SweepConfig(
            delta=delta,
            t_values=t_values,
            seed=_number(cp, "sweep", "seed", int, fallback=0),
            warm_start=_bool(cp, "sweep", "warm_start", True),
            ssc_samples=_number(cp, "sweep", "ssc_samples", int,
                                fallback=200),
        )
    return InstanceConfig(problem=problem, n_boundary=n_boundary,
                          refinement=refinement, solve_options=options,
                          sweep=sweep, path=str(path))


def build_mesh(config: InstanceConfig) -> Mesh:
    return make_disk_mesh(config.n_boundary, config.refinement)


def build_discretization(config: InstanceConfig,
                         mesh: Mesh | None = None) -> Discretization:
    """Mesh the instance and run all admission gates."""
    mesh = mesh if mesh is not None else build_mesh(config)
    return Discretization(config.problem, mesh)


def sweep_plan(config: InstanceConfig, disc: Discretization,
               seed: int | None = None) -> SweepPlan:
    """Realize the [sweep] section on the mesh: evaluate delta at the
    boundary nodes and normalize it to sup-norm 1."""
    if config.sweep is None:
        raise ConfigError("instance file has no [sweep] section")
    vals = disc.eval_node(config.sweep.delta)
    sup = float(np.max(np.abs(vals)))
    if sup <= 0.0:
        raise ConfigError("[sweep] delta: direction vanishes at every "
                          "boundary node")
    delta = BoundaryFunction(disc.mesh, vals / sup)
    return SweepPlan(delta=delta, t_values=config.sweep.t_values,
                     seed=config.sweep.seed if seed is None else seed,
                     warm_start=config.sweep.warm_start,
                     ssc_samples=config.sweep.ssc_samples)


__all__ = ["ConfigError", "SweepConfig", "InstanceConfig", "parse_instance",
           "build_mesh", "build_discretization", "sweep_plan"]
