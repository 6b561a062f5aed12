"""Gauss-Legendre implicit Runge-Kutta tableaus and the step driver.

The q-stage Gauss-Legendre collocation scheme has order 2q.  Its nodes are
the roots of the shifted Legendre polynomial P_q(2c - 1); the weights and
the coupling matrix follow from the B(q) and C(q) order conditions.  The
tableau is computed at startup (no transcribed constants) and is checked
against the order conditions in the test suite.
"""

from dataclasses import dataclass

import numpy as np

from . import network, optim, residuals
from .errors import OptimizerStalled


@dataclass(frozen=True)
class ButcherTableau:
    q: int
    a: np.ndarray    # (q, q)
    b: np.ndarray    # (q,)
    c: np.ndarray    # (q,)

    def __str__(self):
        lines = [f"{self.q}-stage Gauss-Legendre tableau"]
        for j in range(self.q):
            row = "  ".join(f"{v: .15f}" for v in self.a[j])
            lines.append(f"c={self.c[j]: .15f} | {row}")
        lines.append("b:          " + "  ".join(f"{v: .15f}" for v in self.b))
        return "\n".join(lines)


def _legendre_and_derivative(q, x):
    """P_q(x) and P_q'(x) by the three-term recurrence."""
    p0 = np.ones_like(x)
    p1 = x
    if q == 0:
        return p0, np.zeros_like(x)
    for k in range(2, q + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    dp = q * (x * p1 - p0) / (x * x - 1.0)
    return p1, dp


def _legendre_roots(q):
    """Roots of P_q on (-1, 1) by Newton iteration with Maehly deflation."""
    roots = []
    for i in range(q):
        # Chebyshev-like initial guess, refined against found roots
        x = np.cos(np.pi * (4 * i + 3) / (4 * q + 2))
        for _ in range(100):
            p, dp = _legendre_and_derivative(q, np.asarray(x))
            newton = p / dp
            defl = newton / (1.0 - newton * sum(1.0 / (x - r) for r in roots))
            x_new = x - defl
            if abs(x_new - x) < 1e-15:
                x = x_new
                break
            x = x_new
        roots.append(float(x))
    return np.sort(np.asarray(roots))


def gauss_legendre_tableau(q: int) -> ButcherTableau:
    """Construct the q-stage Gauss-Legendre tableau, 1 <= q <= 8."""
    if not 1 <= q <= 8:
        raise ValueError(f"stage count q = {q} outside the supported range 1..8")
    xi = _legendre_roots(q)
    c = 0.5 * (xi + 1.0)
    # Gauss weights on [0, 1]; exact solution of the B(q) Vandermonde system
    _, dp = _legendre_and_derivative(q, xi)
    b = 1.0 / ((1.0 - xi * xi) * dp * dp)
    # coupling rows from the C(q) conditions: sum_k a_jk c_k^(l-1) = c_j^l / l
    V = np.vander(c, q, increasing=True).T          # V[l, k] = c_k^l
    ls = np.arange(1, q + 1)
    rhs = c[None, :] ** ls[:, None] / ls[:, None]   # rhs[l-1, j] = c_j^l / l
    a = np.linalg.solve(V, rhs).T
    return ButcherTableau(q, a, b, c)


def advance_step(points, u_n_values, tableau: ButcherTableau, dt, t_n,
                 source, N, seed, opts: optim.LMOptions = optim.LMOptions(),
                 warm_start: np.ndarray | None = None):
    """One implicit Runge-Kutta step of du/dt = lap_s u + f on fixed points.

    ``points`` carry the frozen geometry (list of SurfacePoint or an
    (X, n, H) triple), ``u_n_values`` the current solution there, and
    ``source`` maps (X, t) to f.  A fresh (q+1)-output network is trained
    each step unless ``warm_start`` passes the previous parameter vector.
    Returns (u_next_values, report, params).
    """
    X, normals, H = residuals._point_arrays(points)
    u_n_values = np.asarray(u_n_values, dtype=float)
    if dt == 0.0:
        report = optim.TrainReport(
            warm_start if warm_start is not None else np.zeros(0),
            [(0, 0.0)], 0.0, 0, 0.0, seed)
        return u_n_values.copy(), report, None

    q = tableau.q
    stage_t = t_n + tableau.c * dt
    f_stage = np.column_stack([source(X, t) for t in stage_t])
    template = network.init_params(N, d=3, K=q + 1, seed=seed)
    system = residuals.build_discrete_rk_system(
        template, (X, normals, H), u_n_values, tableau, dt, f_stage,
        dtype=opts.dtype)
    p0 = warm_start if warm_start is not None else template.to_vector()
    try:
        report = optim.levenberg_marquardt(system, p0, opts, seed=seed)
    except OptimizerStalled as exc:
        raise OptimizerStalled(f"step at t = {t_n}: {exc}", exc.report) from exc
    params = template.like(report.final_params)
    u_next = network.evaluate(params, X)[:, q]
    return u_next, report, params


def solve_diffusion_discrete(points, u0_values, source, q, dt, n_steps, N,
                             seed, opts: optim.LMOptions = optim.LMOptions(),
                             warm_start=False):
    """March n_steps of the q-stage scheme; returns (u_values, reports, params).

    The training points persist across steps so each step's initial data is
    known pointwise from the previous prediction.  With ``warm_start`` each
    step initializes every output row (all stages and the update) from the
    previous step's end-of-step output: stage values sit within O(dt) of
    u_n, so this state is already a near-minimum of the new loss.
    """
    tableau = gauss_legendre_tableau(q)
    u = np.asarray(u0_values, dtype=float)
    reports = []
    params_list = []
    prev_vec = None
    for step in range(n_steps):
        u, report, params = advance_step(
            points, u, tableau, dt, step * dt, source, N,
            seed=seed * 1000 + step, opts=opts, warm_start=prev_vec)
        reports.append(report)
        params_list.append(params)
        if warm_start and params is not None:
            tiled = network.ShallowNetParams(
                np.tile(params.alpha[q], (q + 1, 1)), params.W, params.b)
            prev_vec = tiled.to_vector()
    return u, reports, params_list
