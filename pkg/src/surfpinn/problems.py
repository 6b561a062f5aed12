"""Manufactured solutions, velocity fields, and right-hand-side generators.

Every solution carries hand-coded closed-form derivatives (sin/cos/exp
chains); the right-hand sides follow by substituting the solution into the
PDE, so the exact solution satisfies the discrete residual identically.
Problems are addressable by string id, e.g. ``lb/ellipsoid/sincos`` or
``evolving/shear/uniform``.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry, operators
from .errors import ConfigurationError


@dataclass(frozen=True)
class ManufacturedSolution:
    """Exact solution u(x, t) with hand-coded derivatives.

    All maps take (X, t) with X of shape (M, 3) and scalar or (M,) t, and
    return arrays with leading dimension M.  Stationary solutions simply
    ignore t and have du_dt = 0.
    """

    name: str
    u: Callable
    grad_u: Callable
    hess_u: Callable
    du_dt: Callable


@dataclass(frozen=True)
class VelocityField:
    name: str
    v: Callable          # (X, t) -> (M, 3)
    grad_v: Callable     # (X, t) -> (M, 3, 3), grad_v[i, j] = d v_i / d x_j
    div_v: Callable      # (X, t) -> (M,)


@dataclass(frozen=True)
class SourceTerm:
    name: str
    f: Callable          # (X, t) -> (M,)


def _as_batch(X):
    X = np.asarray(X, dtype=float)
    return np.atleast_2d(X)


# ---------------------------------------------------------------------------
# manufactured solutions
# ---------------------------------------------------------------------------

def _sincos_u(X, t=0.0):
    X = _as_batch(X)
    return np.sin(X[:, 0]) * np.cos(X[:, 1] - X[:, 2])


def _sincos_grad(X, t=0.0):
    X = _as_batch(X)
    sx, cx = np.sin(X[:, 0]), np.cos(X[:, 0])
    s, c = np.sin(X[:, 1] - X[:, 2]), np.cos(X[:, 1] - X[:, 2])
    g = np.empty_like(X)
    g[:, 0] = cx * c
    g[:, 1] = -sx * s
    g[:, 2] = sx * s
    return g


def _sincos_hess(X, t=0.0):
    X = _as_batch(X)
    sx, cx = np.sin(X[:, 0]), np.cos(X[:, 0])
    s, c = np.sin(X[:, 1] - X[:, 2]), np.cos(X[:, 1] - X[:, 2])
    h = np.empty(X.shape + (3,))
    h[:, 0, 0] = -sx * c
    h[:, 0, 1] = h[:, 1, 0] = -cx * s
    h[:, 0, 2] = h[:, 2, 0] = cx * s
    h[:, 1, 1] = -sx * c
    h[:, 1, 2] = h[:, 2, 1] = sx * c
    h[:, 2, 2] = -sx * c
    return h


def _zero_dt(X, t=0.0):
    return np.zeros(_as_batch(X).shape[0])


SINCOS = ManufacturedSolution("sincos", _sincos_u, _sincos_grad, _sincos_hess, _zero_dt)


def _sinexp_parts(X, phase):
    X = _as_batch(X)
    sa, ca = np.sin(X[:, 0] + phase), np.cos(X[:, 0] + phase)
    s, c = np.sin(X[:, 1] - X[:, 2]), np.cos(X[:, 1] - X[:, 2])
    E = np.exp(c)
    return X, sa, ca, s, c, E


def _sinexp_u_phase(X, phase):
    _, sa, _, _, _, E = _sinexp_parts(X, phase)
    return sa * E


def _sinexp_grad_phase(X, phase):
    X, sa, ca, s, _, E = _sinexp_parts(X, phase)
    g = np.empty_like(X)
    g[:, 0] = ca * E
    g[:, 1] = -sa * s * E
    g[:, 2] = sa * s * E
    return g


def _sinexp_hess_phase(X, phase):
    X, sa, ca, s, c, E = _sinexp_parts(X, phase)
    h = np.empty(X.shape + (3,))
    h[:, 0, 0] = -sa * E
    h[:, 0, 1] = h[:, 1, 0] = -ca * s * E
    h[:, 0, 2] = h[:, 2, 0] = ca * s * E
    h[:, 1, 1] = sa * E * (s * s - c)
    h[:, 1, 2] = h[:, 2, 1] = sa * E * (c - s * s)
    h[:, 2, 2] = sa * E * (s * s - c)
    return h


SINEXP = ManufacturedSolution(
    "sinexp",
    lambda X, t=0.0: _sinexp_u_phase(X, 0.0),
    lambda X, t=0.0: _sinexp_grad_phase(X, 0.0),
    lambda X, t=0.0: _sinexp_hess_phase(X, 0.0),
    _zero_dt,
)

# time-dependent variant u = sin(x + sin t) exp(cos(y - z))
SINEXP_T = ManufacturedSolution(
    "sinexp_t",
    lambda X, t: _sinexp_u_phase(X, np.sin(t)),
    lambda X, t: _sinexp_grad_phase(X, np.sin(t)),
    lambda X, t: _sinexp_hess_phase(X, np.sin(t)),
    lambda X, t: np.cos(_as_batch(X)[:, 0] + np.sin(t)) * np.cos(t)
    * np.exp(np.cos(_as_batch(X)[:, 1] - _as_batch(X)[:, 2])),
)

UNIFORM = ManufacturedSolution(
    "uniform",
    lambda X, t=0.0: np.ones(_as_batch(X).shape[0]),
    lambda X, t=0.0: np.zeros_like(_as_batch(X)),
    lambda X, t=0.0: np.zeros(_as_batch(X).shape + (3,)),
    _zero_dt,
)

SOLUTIONS = {"sincos": SINCOS, "sinexp": SINEXP, "sinexp_t": SINEXP_T,
             "uniform": UNIFORM}


# ---------------------------------------------------------------------------
# velocity fields
# ---------------------------------------------------------------------------

def oscillation_factor(t):
    """a(t) = sqrt(1 + 0.95 sin(pi t)) of the oscillating ellipsoid."""
    return np.sqrt(1.0 + 0.95 * np.sin(np.pi * t))


def oscillation_rate(t):
    """a'(t) / a(t)."""
    return 0.475 * np.pi * np.cos(np.pi * t) / (1.0 + 0.95 * np.sin(np.pi * t))


def _oscillating_v(X, t):
    X = _as_batch(X)
    v = np.zeros_like(X)
    v[:, 0] = oscillation_rate(t) * X[:, 0]
    return v


def _oscillating_grad_v(X, t):
    X = _as_batch(X)
    g = np.zeros(X.shape + (3,))
    g[:, 0, 0] = oscillation_rate(t)
    return g


OSCILLATING_V = VelocityField(
    "oscillating_x", _oscillating_v, _oscillating_grad_v,
    lambda X, t: np.full(_as_batch(X).shape[0], oscillation_rate(t)),
)


def _shear_v(X, t):
    X = _as_batch(X)
    v = np.zeros_like(X)
    v[:, 0] = X[:, 2]
    return v


def _shear_grad_v(X, t):
    X = _as_batch(X)
    g = np.zeros(X.shape + (3,))
    g[:, 0, 2] = 1.0
    return g


SHEAR_V = VelocityField(
    "shear", _shear_v, _shear_grad_v,
    lambda X, t: np.zeros(_as_batch(X).shape[0]),
)

ZERO_V = VelocityField(
    "zero",
    lambda X, t: np.zeros_like(_as_batch(X)),
    lambda X, t: np.zeros(_as_batch(X).shape + (3,)),
    lambda X, t: np.zeros(_as_batch(X).shape[0]),
)

VELOCITIES = {"oscillating_x": OSCILLATING_V, "shear": SHEAR_V, "zero": ZERO_V}


# ---------------------------------------------------------------------------
# source terms
# ---------------------------------------------------------------------------

def _heating_bump(X, t=0.0):
    X = _as_batch(X)
    return np.exp(-((X[:, 0] + 1.0) ** 2 + (X[:, 1] + 1.0) ** 2
                    + (X[:, 2] - 1.0) ** 2))


HEATING_BUMP = SourceTerm("gaussian_bump", _heating_bump)


# ---------------------------------------------------------------------------
# right-hand sides from manufactured solutions
# ---------------------------------------------------------------------------

def laplace_beltrami_of(sol: ManufacturedSolution, normals, curvatures, X, t=0.0):
    return operators.laplace_beltrami(
        sol.grad_u(X, t), sol.hess_u(X, t), normals, curvatures)


def rhs_laplace_beltrami(sol: ManufacturedSolution, normals, curvatures, X):
    """f with lap_s u = f."""
    return laplace_beltrami_of(sol, normals, curvatures, X, 0.0)


def rhs_diffusion(sol: ManufacturedSolution, normals, curvatures, X, t):
    """f with du/dt = lap_s u + f."""
    return sol.du_dt(X, t) - laplace_beltrami_of(sol, normals, curvatures, X, t)


def rhs_advection_diffusion(sol: ManufacturedSolution, vel: VelocityField,
                            normals, curvatures, X, t):
    """f with du/dt + v . grad u + (div_s v) u = lap_s u + f."""
    X = _as_batch(X)
    sdiv = operators.surface_divergence(vel.grad_v(X, t), vel.div_v(X, t), normals)
    adv = np.sum(vel.v(X, t) * sol.grad_u(X, t), axis=-1)
    return (sol.du_dt(X, t) + adv + sdiv * sol.u(X, t)
            - laplace_beltrami_of(sol, normals, curvatures, X, t))


def boundary_values(sol: ManufacturedSolution, X_boundary, t=0.0):
    """Dirichlet data from the manufactured solution on the boundary curve."""
    return sol.u(X_boundary, t)


# ---------------------------------------------------------------------------
# problem registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StationaryProblem:
    """lap_s u = f on a static surface, optionally with Dirichlet boundary."""

    problem_id: str
    surface: geometry.LevelSetSurface
    solution: ManufacturedSolution

    def f_at(self, normals, curvatures, X):
        return rhs_laplace_beltrami(self.solution, normals, curvatures, X)


@dataclass(frozen=True)
class DiffusionProblem:
    """du/dt = lap_s u + f on a static surface.

    Either manufactured (solution given, f derived) or source-driven
    (source given, no exact solution, u0 = 0).
    """

    problem_id: str
    surface: geometry.LevelSetSurface
    solution: ManufacturedSolution | None
    source: SourceTerm | None = None

    def f_at(self, normals, curvatures, X, t):
        if self.solution is not None:
            return rhs_diffusion(self.solution, normals, curvatures, X, t)
        return self.source.f(X, t)

    def u0_at(self, X):
        if self.solution is not None:
            return self.solution.u(X, 0.0)
        return np.zeros(_as_batch(X).shape[0])


@dataclass(frozen=True)
class EvolvingProblem:
    """Advection-diffusion on a surface moved by a prescribed velocity.

    ``initial_map`` parametrizes the initial configuration over the unit
    sphere; ``exact_map`` (when available) gives the exact configuration at
    any time for testing.  Both objects follow the parametric-map protocol
    of :mod:`surfpinn.evolving`.
    """

    problem_id: str
    velocity: VelocityField
    solution: ManufacturedSolution | None
    initial_map: object
    exact_map: object | None
    source_is_zero: bool = False

    def f_at(self, normals, curvatures, X, t):
        if self.source_is_zero or self.solution is None:
            return np.zeros(_as_batch(X).shape[0])
        return rhs_advection_diffusion(self.solution, self.velocity,
                                       normals, curvatures, X, t)

    def u0_at(self, X):
        if self.solution is None:
            return np.ones(_as_batch(X).shape[0])
        return self.solution.u(X, 0.0)


def get_problem(problem_id: str):
    """Resolve a problem id of the form family/surface/solution."""
    from . import evolving  # deferred to avoid an import cycle

    parts = problem_id.split("/")
    if len(parts) != 3:
        raise ConfigurationError(
            f"problem id {problem_id!r} must look like family/surface/solution")
    family, surf_name, sol_name = parts

    if family == "lb":
        if sol_name not in SOLUTIONS:
            raise ConfigurationError(f"unknown solution {sol_name!r}")
        return StationaryProblem(problem_id, geometry.builtin_surface(surf_name),
                                 SOLUTIONS[sol_name])

    if family == "diffusion":
        surface = geometry.builtin_surface(surf_name)
        if sol_name == "bump":
            return DiffusionProblem(problem_id, surface, None, HEATING_BUMP)
        if sol_name == "sinexp":
            # time-dependent variant of the sinexp solution
            return DiffusionProblem(problem_id, surface, SINEXP_T)
        if sol_name in SOLUTIONS:
            return DiffusionProblem(problem_id, surface, SOLUTIONS[sol_name])
        raise ConfigurationError(f"unknown solution {sol_name!r}")

    if family == "evolving":
        if surf_name == "oscillating":
            if sol_name != "sinexp":
                raise ConfigurationError(
                    f"evolving/oscillating supports only sinexp, got {sol_name!r}")
            return EvolvingProblem(
                problem_id, OSCILLATING_V, SINEXP_T,
                initial_map=evolving.OscillatingEllipsoidMap(),
                exact_map=evolving.OscillatingEllipsoidMap(),
            )
        if surf_name == "shear":
            if sol_name != "uniform":
                raise ConfigurationError(
                    f"evolving/shear supports only uniform, got {sol_name!r}")
            return EvolvingProblem(
                problem_id, SHEAR_V, None,
                initial_map=evolving.ShearedSphereMap(),
                exact_map=evolving.ShearedSphereMap(),
                source_is_zero=True,
            )
        raise ConfigurationError(f"unknown evolving case {surf_name!r}")

    raise ConfigurationError(f"unknown problem family {family!r}")
