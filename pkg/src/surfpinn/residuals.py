"""Training losses as residual systems with analytic parameter Jacobians.

Each mean-squared loss  (1/M) sum_i e_i^2  is folded into a residual vector
with rows r_i = e_i / sqrt(M), so that sum(r^2) reproduces the loss exactly
and a damped least-squares optimizer minimizes it directly.  Every builder
returns a :class:`ResidualSystem` whose ``residuals_and_jacobian`` assembles
rows and the exact Jacobian from the closed-form network derivatives in
:mod:`surfpinn.network`; nothing is differentiated numerically.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .geometry import SurfacePoint, cloud_arrays
from .network import ShallowNetParams, TwoLayerNetParams, sigmoid_stack


@dataclass(frozen=True)
class ResidualGroup:
    label: str
    start: int
    stop: int
    weight: float


@dataclass(frozen=True)
class ResidualSystem:
    """Residual vector r(p) and Jacobian J(p) with Loss(p) = sum r_i^2."""

    n_params: int
    n_residuals: int
    groups: tuple
    residuals: Callable
    residuals_and_jacobian: Callable

    def loss(self, p) -> float:
        r = self.residuals(p)
        return float(r @ r)


def _point_arrays(points):
    """Accept a list of SurfacePoint or a prebuilt (X, n, H) triple."""
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], SurfacePoint):
        X, n, H, _ = cloud_arrays(points)
        return X, n, H
    X, n, H = points
    return np.asarray(X, float), np.asarray(n, float), np.asarray(H, float)


def concat_systems(*systems) -> ResidualSystem:
    """Stack residual systems over the same parameter vector."""
    n_params = systems[0].n_params
    if any(s.n_params != n_params for s in systems):
        raise ConfigurationError("cannot concatenate systems with different n_params")
    groups = []
    offset = 0
    for s in systems:
        for g in s.groups:
            groups.append(ResidualGroup(g.label, g.start + offset, g.stop + offset,
                                        g.weight))
        offset += s.n_residuals

    def residuals(p):
        return np.concatenate([s.residuals(p) for s in systems])

    def residuals_and_jacobian(p):
        parts = [s.residuals_and_jacobian(p) for s in systems]
        r = np.concatenate([r_ for r_, _ in parts])
        J = np.vstack([J_ for _, J_ in parts])
        return r, J

    return ResidualSystem(n_params, offset, tuple(groups), residuals,
                          residuals_and_jacobian)


# ---------------------------------------------------------------------------
# shallow-net row kernels
#
# Every scalar row family below has the per-neuron form
#     row_i = sum_j alpha_j * Phi_ij - data_i
# with Phi depending on the sigmoid stack and static geometry.  The Jacobian
# needs Phi itself (alpha block), dPhi/dz_ij (chain through z = W x + b for
# the W and b blocks) and any explicit W dependence.
# ---------------------------------------------------------------------------

class _ShallowKernel:
    """Precomputed per-evaluation sigmoid stack for a fixed point set."""

    def __init__(self, X, dtype):
        self.X = np.asarray(X, dtype=dtype)
        self.M, self.d = self.X.shape

    def activate(self, W, b):
        Z = self.X @ W.T + b
        self.S0, self.S1, self.S2, self.S3 = sigmoid_stack(Z)


def _lb_phi(kernel, W, normals, H):
    """Per-neuron lap_s basis: S2 (|Ws|^2 - (Ws.n)^2) - 2H S1 (Ws.n).

    Spatial weights are the first three columns of W (identical to W for
    d = 3 nets).  Returns (phi, dphi_dz, explicit_W) where explicit_W has
    shape (M, N, 3) covering the spatial columns only.
    """
    Ws = W[:, :3]
    WN = normals @ Ws.T                       # (M, N)
    w2 = np.sum(Ws * Ws, axis=1)              # (N,)
    gsp = w2[None, :] - WN**2
    H2 = 2.0 * H[:, None]
    phi = kernel.S2 * gsp - H2 * kernel.S1 * WN
    dphi = kernel.S3 * gsp - H2 * kernel.S2 * WN
    expl = (kernel.S2[:, :, None] * 2.0 * (Ws[None, :, :] - WN[:, :, None] * normals[:, None, :])
            - H2[:, :, None] * kernel.S1[:, :, None] * normals[:, None, :])
    return phi, dphi, expl


def _assemble_scalar_rows(kernel, alpha, phi, dphi, expl, data, weight):
    """Rows w*(Phi @ alpha - data) and their Jacobian for a K = 1 net."""
    weight = float(weight)
    M, d = kernel.M, kernel.d
    N = phi.shape[1]
    r = weight * (phi @ alpha - data)
    Ja = weight * phi
    JW = dphi[:, :, None] * kernel.X[:, None, :]
    if expl is not None:
        JW = JW.copy()
        JW[:, :, :expl.shape[2]] += expl
    JW = (weight * alpha)[None, :, None] * JW
    Jb = (weight * alpha)[None, :] * dphi
    J = np.concatenate([Ja, JW.reshape(M, N * d), Jb], axis=1)
    return r, J


def _scalar_system(template, X, phi_builder, data, weight, label, dtype):
    """Generic single-group scalar system for a shallow K = 1 net."""
    kernel = _ShallowKernel(X, dtype)
    data = np.asarray(data, dtype=dtype)
    weight = float(weight)
    N, d = template.N, template.d
    n_params = template.n_params

    def _parts(p):
        params = template.like(np.asarray(p, dtype=dtype))
        kernel.activate(params.W.astype(dtype), params.b.astype(dtype))
        return params, phi_builder(kernel, params.W)

    def residuals(p):
        params, (phi, _, _) = _parts(p)
        return weight * (phi @ params.alpha[0] - data)

    def residuals_and_jacobian(p):
        params, (phi, dphi, expl) = _parts(p)
        return _assemble_scalar_rows(kernel, params.alpha[0], phi, dphi, expl,
                                     data, weight)

    groups = (ResidualGroup(label, 0, kernel.M, weight),)
    return ResidualSystem(n_params, kernel.M, groups, residuals,
                          residuals_and_jacobian)


# ---------------------------------------------------------------------------
# stationary systems
# ---------------------------------------------------------------------------

def build_lb_system(template, points, f_values, dtype=np.float64) -> ResidualSystem:
    """Rows (1/sqrt(M)) [lap_s u - f] at on-surface points.

    ``template`` fixes the network shape (shallow or two-layer, K = 1,
    d = 3); ``f_values`` are precomputed right-hand sides.
    """
    X, normals, H = _point_arrays(points)
    if len(X) == 0:
        raise ConfigurationError("empty training point set")
    if isinstance(template, TwoLayerNetParams):
        return _build_lb_system_two_layer(template, X, normals, H, f_values, dtype)
    X = X.astype(dtype)
    normals = normals.astype(dtype)
    H = H.astype(dtype)
    weight = 1.0 / np.sqrt(len(X))

    def phi_builder(kernel, W):
        return _lb_phi(kernel, W, normals, H)

    return _scalar_system(template, X, phi_builder, f_values, weight,
                          "surface_operator", dtype)


def build_normal_extension_system(template, points, f_values,
                                  dtype=np.float64) -> ResidualSystem:
    """Baseline splitting rows: [lap u - f], [du/dn], [n^T hess u n].

    Three groups of M rows each, every one weighted 1/sqrt(M).
    """
    X, normals, H = _point_arrays(points)
    if len(X) == 0:
        raise ConfigurationError("empty training point set")
    X = X.astype(dtype)
    normals = normals.astype(dtype)
    f_values = np.asarray(f_values, dtype=dtype)
    M = len(X)
    weight = float(1.0 / np.sqrt(M))
    kernel = _ShallowKernel(X, dtype)
    zeros = np.zeros(M, dtype=dtype)

    def _families(kernel, W):
        WN = normals @ W.T
        w2 = np.sum(W * W, axis=1)[None, :]
        lap = (kernel.S2 * w2, kernel.S3 * w2, 2.0 * kernel.S2[:, :, None] * W[None])
        dn = (kernel.S1 * WN, kernel.S2 * WN,
              kernel.S1[:, :, None] * normals[:, None, :])
        nhn = (kernel.S2 * WN**2, kernel.S3 * WN**2,
               2.0 * kernel.S2[:, :, None] * WN[:, :, None] * normals[:, None, :])
        return lap, dn, nhn

    def residuals(p):
        params = template.like(np.asarray(p, dtype=dtype))
        kernel.activate(params.W.astype(dtype), params.b.astype(dtype))
        lap, dn, nhn = _families(kernel, params.W)
        a = params.alpha[0]
        return weight * np.concatenate([lap[0] @ a - f_values, dn[0] @ a, nhn[0] @ a])

    def residuals_and_jacobian(p):
        params = template.like(np.asarray(p, dtype=dtype))
        kernel.activate(params.W.astype(dtype), params.b.astype(dtype))
        a = params.alpha[0]
        rows = []
        jacs = []
        for (phi, dphi, expl), data in zip(_families(kernel, params.W),
                                           [f_values, zeros, zeros]):
            r, J = _assemble_scalar_rows(kernel, a, phi, dphi, expl, data, weight)
            rows.append(r)
            jacs.append(J)
        return np.concatenate(rows), np.vstack(jacs)

    groups = (ResidualGroup("laplacian", 0, M, weight),
              ResidualGroup("normal_derivative", M, 2 * M, weight),
              ResidualGroup("normal_hessian", 2 * M, 3 * M, weight))
    return ResidualSystem(template.n_params, 3 * M, groups, residuals,
                          residuals_and_jacobian)


def build_dirichlet_system(template, boundary_X, u_b_values,
                           dtype=np.float64) -> ResidualSystem:
    """Penalty rows (1/sqrt(M_b)) [u(x) - u_b(x)] on boundary points.

    Concatenate with an interior system via :func:`concat_systems`.
    """
    boundary_X = np.atleast_2d(np.asarray(boundary_X, dtype=dtype))
    if template.d == 4 and boundary_X.shape[1] == 3:
        raise ConfigurationError("boundary points must match the net dimension")
    weight = 1.0 / np.sqrt(len(boundary_X))

    def phi_builder(kernel, W):
        return kernel.S0, kernel.S1, None

    return _scalar_system(template, boundary_X, phi_builder, u_b_values, weight,
                          "dirichlet", dtype)


def _build_lb_system_two_layer(template, X, normals, H, f_values, dtype):
    X = X.astype(dtype)
    normals = normals.astype(dtype)
    H = H.astype(dtype)
    f_values = np.asarray(f_values, dtype=dtype)
    M = len(X)
    N, d = template.N, template.d
    weight = float(1.0 / np.sqrt(M))
    H2 = 2.0 * H[:, None]

    def _forward(p):
        params = template.like(np.asarray(p, dtype=dtype))
        alpha = params.alpha[0]
        h0, h1, h2, h3 = sigmoid_stack(X @ params.W1.T + params.b1)
        g0, g1, g2, g3 = sigmoid_stack(h0 @ params.W2.T + params.b2)
        D = np.einsum("jm,im,ma->ija", params.W2, h1, params.W1, optimize=True)
        Dn = np.einsum("ija,ia->ij", D, normals)
        Q = np.einsum("ija,ija->ij", D, D) - Dn**2
        W1N = normals @ params.W1.T
        kappa = np.sum(params.W1**2, axis=1)[None, :] - W1N**2
        S = np.einsum("jm,im,im->ij", params.W2, h2, kappa, optimize=True)
        R = -H2 * Dn
        phi = g2 * Q + g1 * (S + R)
        return (params, alpha, (h0, h1, h2, h3), (g0, g1, g2, g3),
                D, Dn, Q, W1N, kappa, S, R, phi)

    def residuals(p):
        state = _forward(p)
        alpha, phi = state[1], state[-1]
        return weight * (phi @ alpha - f_values)

    def residuals_and_jacobian(p):
        (params, alpha, (h0, h1, h2, h3), (g0, g1, g2, g3),
         D, Dn, Q, W1N, kappa, S, R, phi) = _forward(p)
        W1, W2 = params.W1, params.W2
        r = weight * (phi @ alpha - f_values)

        G = g3 * Q + g2 * (S + R)            # d phi / d z2
        Ja = phi
        Jb2 = alpha[None, :] * G

        DW1 = np.einsum("ija,ma->ijm", D, W1)
        # W2 block, flattened (j, m) row-major
        JW2 = alpha[None, :, None] * (
            G[:, :, None] * h0[:, None, :]
            + g2[:, :, None] * 2.0 * h1[:, None, :]
            * (DW1 - Dn[:, :, None] * W1N[:, None, :])
            + g1[:, :, None] * (h2[:, None, :] * kappa[:, None, :]
                                - H2[:, :, None] * h1[:, None, :] * W1N[:, None, :])
        )

        A1 = np.einsum("j,ij,jm->im", alpha, G, W2, optimize=True)
        A2D = np.einsum("j,ij,jm,ijm->im", alpha, g2, W2, DW1, optimize=True)
        A2Dn = np.einsum("j,ij,jm,ij->im", alpha, g2, W2, Dn, optimize=True)
        A3 = np.einsum("j,ij,jm->im", alpha, g1, W2, optimize=True)
        Jb1 = (h1 * A1 + 2.0 * h2 * (A2D - A2Dn * W1N)
               - H2 * h2 * W1N * A3 + h3 * kappa * A3)

        CD = D - Dn[:, :, None] * normals[:, None, :]
        A2CD = np.einsum("j,ij,jm,ijc->imc", alpha, g2, W2, CD, optimize=True)
        expl = (2.0 * h1[:, :, None] * A2CD
                + A3[:, :, None] * (-H2[:, :, None] * h1[:, :, None] * normals[:, None, :]
                                    + h2[:, :, None] * 2.0
                                    * (W1[None] - W1N[:, :, None] * normals[:, None, :])))
        JW1 = Jb1[:, :, None] * X[:, None, :] + expl

        J = weight * np.concatenate(
            [Ja, JW2.reshape(M, N * N), Jb2, JW1.reshape(M, N * d), Jb1], axis=1)
        return r, J

    groups = (ResidualGroup("surface_operator", 0, M, weight),)
    return ResidualSystem(template.n_params, M, groups, residuals,
                          residuals_and_jacobian)


# ---------------------------------------------------------------------------
# time-dependent systems (continuous-time, d = 4 input)
# ---------------------------------------------------------------------------

def _diffusion_phi(kernel, W, normals, H, time_scale=1.0):
    """Per-neuron basis of du/dt - lap_s u for a space-time net.

    When the net's fourth input is a rescaled time tau = (t - t0) / width,
    the physical time derivative is (1/width) du/dtau; ``time_scale`` is
    that width.
    """
    phi_lb, dphi_lb, expl_lb = _lb_phi(kernel, W, normals, H)
    ts = 1.0 / time_scale
    wt = ts * W[:, 3]
    phi = kernel.S1 * wt[None, :] - phi_lb
    dphi = kernel.S2 * wt[None, :] - dphi_lb
    expl = np.zeros(kernel.S0.shape + (4,), dtype=kernel.X.dtype)
    expl[:, :, :3] = -expl_lb
    expl[:, :, 3] = ts * kernel.S1
    return phi, dphi, expl


def build_continuous_time_system(template, spacetime_points, f_values,
                                 initial_X, u0_values, t0=0.0,
                                 dtype=np.float64) -> ResidualSystem:
    """Diffusion rows plus initial-condition rows for a d = 4 net.

    ``spacetime_points`` is (XT, n, H) with XT of shape (M_T, 4); initial
    rows evaluate the net at t = t0 on ``initial_X``.
    """
    XT, normals, H = spacetime_points
    XT = np.asarray(XT, dtype=dtype)
    normals = np.asarray(normals, dtype=dtype)
    H = np.asarray(H, dtype=dtype)
    weight_T = 1.0 / np.sqrt(len(XT))

    def phi_builder(kernel, W):
        return _diffusion_phi(kernel, W, normals, H)

    interior = _scalar_system(template, XT, phi_builder, f_values, weight_T,
                              "pde", dtype)

    initial_X = np.atleast_2d(np.asarray(initial_X, dtype=dtype))
    X0 = np.concatenate([initial_X, np.full((len(initial_X), 1), t0, dtype=dtype)],
                        axis=1)
    init = build_dirichlet_system(template, X0, u0_values, dtype)
    init = ResidualSystem(init.n_params, init.n_residuals,
                          (ResidualGroup("initial", 0, init.n_residuals,
                                         init.groups[0].weight),),
                          init.residuals, init.residuals_and_jacobian)
    return concat_systems(interior, init)


def build_evolving_pde_system(template, samples, vel_values, grad_v_values,
                              f_values, initial_X, u0_values, t0=0.0,
                              time_scale=1.0, dtype=np.float64) -> ResidualSystem:
    """Advection-diffusion rows on a moving surface, geometry frozen.

    ``samples`` is (X, t, n, H) at the space-time training points, with t
    already in the network's (possibly rescaled) time coordinate; velocity,
    its Jacobian and f are precomputed at the physical times.  Rows read

        du/dt + v . grad u + (div_s v) u - lap_s u - f.
    """
    X, t, normals, H = samples
    X = np.asarray(X, dtype=dtype)
    t = np.asarray(t, dtype=dtype)
    normals = np.asarray(normals, dtype=dtype)
    H = np.asarray(H, dtype=dtype)
    vel_values = np.asarray(vel_values, dtype=dtype)
    grad_v_values = np.asarray(grad_v_values, dtype=dtype)
    XT = np.concatenate([X, t[:, None]], axis=1)
    weight_T = 1.0 / np.sqrt(len(XT))

    div_v = np.trace(grad_v_values, axis1=-2, axis2=-1)
    nvn = np.einsum("mi,mij,mj->m", normals, grad_v_values, normals)
    sdiv = (div_v - nvn)[:, None]

    def phi_builder(kernel, W):
        phi_d, dphi_d, expl_d = _diffusion_phi(kernel, W, normals, H, time_scale)
        WV = vel_values @ W[:, :3].T
        phi = phi_d + kernel.S1 * WV + sdiv * kernel.S0
        dphi = dphi_d + kernel.S2 * WV + sdiv * kernel.S1
        expl = expl_d.copy()
        expl[:, :, :3] += kernel.S1[:, :, None] * vel_values[:, None, :]
        return phi, dphi, expl

    interior = _scalar_system(template, XT, phi_builder, f_values, weight_T,
                              "pde", dtype)

    initial_X = np.atleast_2d(np.asarray(initial_X, dtype=dtype))
    X0 = np.concatenate([initial_X, np.full((len(initial_X), 1), t0, dtype=dtype)],
                        axis=1)
    init = build_dirichlet_system(template, X0, u0_values, dtype)
    init = ResidualSystem(init.n_params, init.n_residuals,
                          (ResidualGroup("initial", 0, init.n_residuals,
                                         init.groups[0].weight),),
                          init.residuals, init.residuals_and_jacobian)
    return concat_systems(interior, init)


# ---------------------------------------------------------------------------
# discrete-time Runge-Kutta system (multi-output net)
# ---------------------------------------------------------------------------

def build_discrete_rk_system(template, points, u_n_values, tableau, dt,
                             f_stage_values, dtype=np.float64) -> ResidualSystem:
    """Collocation rows of a q-stage implicit Runge-Kutta step.

    The K = q + 1 outputs of ``template`` are the stage solutions followed
    by the end-of-step solution.  For every point the q stage rows and the
    update row are weighted 1/sqrt(M):

        u_(j) - u_n - dt sum_k a_jk (lap_s u_(k) + f_k)      j = 1..q
        u_(q+1) - u_n - dt sum_k b_k  (lap_s u_(k) + f_k)
    """
    q = tableau.q
    if template.K != q + 1:
        raise ValueError(f"net has K = {template.K} outputs, tableau needs {q + 1}")
    X, normals, H = _point_arrays(points)
    X = X.astype(dtype)
    normals = normals.astype(dtype)
    H = H.astype(dtype)
    u_n_values = np.asarray(u_n_values, dtype=dtype)
    f_stage = np.asarray(f_stage_values, dtype=dtype)       # (M, q)
    if f_stage.shape != (len(X), q):
        raise ValueError("f_stage_values must have shape (M, q)")
    M = len(X)
    N, d, K = template.N, template.d, template.K
    weight = np.asarray(1.0 / np.sqrt(M), dtype=dtype)
    a = np.asarray(tableau.a, dtype=dtype)
    bvec = np.asarray(tableau.b, dtype=dtype)
    kernel = _ShallowKernel(X, dtype)
    dt = dtype(dt)

    def _stage_values(params):
        kernel.activate(params.W.astype(dtype), params.b.astype(dtype))
        phi, dphi, expl = _lb_phi(kernel, params.W, normals, H)
        U = kernel.S0 @ params.alpha.T            # (M, K)
        LB = phi @ params.alpha.T                 # (M, K), lap_s of each output
        return U, LB, phi, dphi, expl

    def _rows(U, LB):
        rhs = LB[:, :q] + f_stage                 # (M, q)
        r_stage = U[:, :q] - u_n_values[:, None] - dt * rhs @ a.T
        r_upd = U[:, q] - u_n_values - dt * rhs @ bvec
        return weight * np.concatenate([r_stage.T.ravel(), r_upd])

    def residuals(p):
        params = template.like(np.asarray(p, dtype=dtype))
        U, LB, *_ = _stage_values(params)
        return _rows(U, LB)

    def residuals_and_jacobian(p):
        params = template.like(np.asarray(p, dtype=dtype))
        U, LB, phi, dphi, expl = _stage_values(params)
        r = _rows(U, LB)
        alpha = params.alpha

        # W chain including the explicit spatial dependence of lap_s
        dlb_dW = dphi[:, :, None] * kernel.X[:, None, :]
        dlb_dW[:, :, :3] += expl                   # (M, N, d) per-neuron
        dval_dW = kernel.S1[:, :, None] * kernel.X[:, None, :]

        eyeK = np.eye(K, dtype=dtype)
        # stage rows: J alpha[(j,i), (l,m)] = d_jl S0_im - dt a_jl phi_im
        Ja_stage = (np.einsum("jl,im->jilm", eyeK[:q], kernel.S0)
                    - dt * np.einsum("jl,im->jilm",
                                     np.concatenate([a, np.zeros((q, 1), dtype=dtype)], axis=1),
                                     phi))
        bfull = np.concatenate([bvec, np.zeros(1, dtype=dtype)])
        Ja_upd = (np.einsum("l,im->ilm", eyeK[q], kernel.S0)
                  - dt * np.einsum("l,im->ilm", bfull, phi))

        # alpha-weighted chains for W and b blocks
        a_alpha = a @ alpha[:q]                    # (q, N) rows sum_k a_jk alpha_k
        b_alpha = bvec @ alpha[:q]                 # (N,)
        JW_stage = (alpha[:q][:, None, :, None] * dval_dW[None]
                    - dt * a_alpha[:, None, :, None] * dlb_dW[None])
        JW_upd = (alpha[q][None, :, None] * dval_dW
                  - dt * b_alpha[None, :, None] * dlb_dW)
        Jb_stage = (alpha[:q][:, None, :] * kernel.S1[None]
                    - dt * a_alpha[:, None, :] * dphi[None])
        Jb_upd = alpha[q][None, :] * kernel.S1 - dt * b_alpha[None, :] * dphi

        J_stage = np.concatenate(
            [Ja_stage.reshape(q, M, K * N),
             JW_stage.reshape(q, M, N * d),
             Jb_stage], axis=2).reshape(q * M, template.n_params)
        J_upd = np.concatenate(
            [Ja_upd.reshape(M, K * N), JW_upd.reshape(M, N * d), Jb_upd], axis=1)
        J = weight * np.vstack([J_stage, J_upd])
        return r, J

    groups = (ResidualGroup("stages", 0, q * M, float(weight)),
              ResidualGroup("update", q * M, (q + 1) * M, float(weight)))
    return ResidualSystem(template.n_params, (q + 1) * M, groups, residuals,
                          residuals_and_jacobian)


# ---------------------------------------------------------------------------
# surface-tracking system (homeomorphism net)
# ---------------------------------------------------------------------------

def build_surface_tracking_system(template, param_points, velocity,
                                  initial_points, x0_targets, t0=0.0,
                                  times_phys=None, time_scale=1.0,
                                  dtype=np.float64) -> ResidualSystem:
    """Rows dx/dt - v(x, t) plus initial-configuration rows.

    ``param_points`` is (theta, phi, t) for the transport rows, with t in
    the network's time coordinate; ``times_phys`` (defaulting to t) holds
    the physical times at which the velocity is evaluated, and
    ``time_scale`` is the physical width of one unit of network time.
    ``initial_points`` is (theta0, phi0) evaluated at t = t0 against
    ``x0_targets``.  The velocity is evaluated at the network's own output,
    so its spatial Jacobian enters the parameter Jacobian.
    """
    from .evolving import sphere_embed  # local import to avoid a cycle

    theta, phi, t = (np.asarray(v, dtype=dtype) for v in param_points)
    theta0, phi0 = (np.asarray(v, dtype=dtype) for v in initial_points)
    x0_targets = np.asarray(x0_targets, dtype=dtype)
    t_phys = t if times_phys is None else np.asarray(times_phys, dtype=dtype)
    ts = dtype(1.0 / time_scale)
    MT, M0 = len(theta), len(theta0)
    wT = dtype(1.0 / np.sqrt(MT))
    w0 = dtype(1.0 / np.sqrt(M0))

    S = np.concatenate([sphere_embed(theta, phi), t[:, None]], axis=1)
    S0in = np.concatenate([sphere_embed(theta0, phi0),
                           np.full((M0, 1), t0, dtype=dtype)], axis=1)
    N = template.N

    def _unpack(p):
        return template.like(np.asarray(p, dtype=dtype))

    def residuals(p):
        net = _unpack(p)
        h0, h1, _, _ = sigmoid_stack(S @ net.W1.T + net.b1)
        xN = h0 @ net.W2.T
        xt = (h1 * (ts * net.W1[:, 3])[None, :]) @ net.W2.T
        rT = wT * (xt - velocity.v(xN, t_phys))
        h0i, _, _, _ = sigmoid_stack(S0in @ net.W1.T + net.b1)
        r0 = w0 * (h0i @ net.W2.T - x0_targets)
        return np.concatenate([rT.ravel(), r0.ravel()])

    def residuals_and_jacobian(p):
        net = _unpack(p)
        W1, b1, W2 = net.W1, net.b1, net.W2
        w1t = ts * W1[:, 3]
        h0, h1, h2, _ = sigmoid_stack(S @ W1.T + b1)
        xN = h0 @ W2.T
        xt = (h1 * w1t[None, :]) @ W2.T
        v = velocity.v(xN, t_phys)
        gv = velocity.grad_v(xN, t_phys)          # (MT, 3, 3)

        n_p = template.n_params
        r = np.empty(3 * (MT + M0), dtype=dtype)
        r[:3 * MT] = (wT * (xt - v)).ravel()
        J = np.empty((3 * (MT + M0), n_p), dtype=dtype)

        # transport rows; the b1 block B also seeds the W1 block (chain rule
        # with the extra factor s_a plus the explicit time-column term)
        gW2 = gv @ W2                              # (MT, 3, N)
        B = W2[None, :, :] * (h2 * w1t)[:, None, :] - gW2 * h1[:, None, :]
        JT = J[:3 * MT].reshape(MT, 3, n_p)
        JT_W2 = JT[:, :, :3 * N].reshape(MT, 3, 3, N)
        JT_W2[:] = -gv[:, :, :, None] * h0[:, None, None, :]
        h1w = h1 * w1t
        for c in range(3):
            JT_W2[:, c, c, :] += h1w
        JT_W1 = JT[:, :, 3 * N:7 * N].reshape(MT, 3, N, 4)
        JT_W1[:] = B[:, :, :, None] * S[:, None, None, :]
        JT_W1[:, :, :, 3] += (ts * W2)[None, :, :] * h1[:, None, :]
        JT[:, :, 7 * N:] = B
        JT *= wT

        # initial-configuration rows
        h0i, h1i, _, _ = sigmoid_stack(S0in @ W1.T + b1)
        r[3 * MT:] = (w0 * (h0i @ W2.T - x0_targets)).ravel()
        J0 = J[3 * MT:].reshape(M0, 3, n_p)
        J0_W2 = J0[:, :, :3 * N].reshape(M0, 3, 3, N)
        J0_W2[:] = 0.0
        for c in range(3):
            J0_W2[:, c, c, :] = h0i
        B0 = W2[None, :, :] * h1i[:, None, :]
        J0[:, :, 3 * N:7 * N].reshape(M0, 3, N, 4)[:] = (
            B0[:, :, :, None] * S0in[:, None, None, :])
        J0[:, :, 7 * N:] = B0
        J0 *= w0
        return r, J

    groups = (ResidualGroup("transport", 0, 3 * MT, float(wT)),
              ResidualGroup("initial", 3 * MT, 3 * MT + 3 * M0, float(w0)))
    return ResidualSystem(template.n_params, 3 * (MT + M0), groups, residuals,
                          residuals_and_jacobian)
