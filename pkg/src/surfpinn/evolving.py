"""Evolving surfaces: homeomorphism network, geometry, and sequential solver.

A genus-zero surface is tracked by a network whose fixed first layer embeds
the parameters onto the unit sphere,

    x(theta, phi, t) = W2 sigmoid(W1 (S2(theta, phi), t)^T + b1),

which is 2-pi periodic in phi and single valued at the poles by
construction.  Normals and mean curvature on the tracked surface come from
the first and second fundamental forms; surface integrals use a
Gauss-Legendre rule in theta and the midpoint rule in phi.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import network, optim, residuals
from .errors import GeometryError, IntegrationError, OptimizerStalled
from .network import sigmoid_stack
from .problems import oscillation_factor

TWO_PI = 2.0 * np.pi


def sphere_embed(theta, phi):
    """Unit-sphere embedding (sin t cos p, sin t sin p, cos t), phi wrapped."""
    theta = np.asarray(theta, dtype=float)
    phi = np.mod(np.asarray(phi, dtype=float), TWO_PI)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    return np.stack([st * cp, st * sp, ct], axis=-1)


def _sphere_embed_derivs(theta, phi):
    """S2 and its first and second parameter derivatives, shape (M, 3) each."""
    theta = np.asarray(theta, dtype=float)
    phi = np.mod(np.asarray(phi, dtype=float), TWO_PI)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    z = np.zeros_like(st)
    s = np.stack([st * cp, st * sp, ct], axis=-1)
    s_th = np.stack([ct * cp, ct * sp, -st], axis=-1)
    s_ph = np.stack([-st * sp, st * cp, z], axis=-1)
    s_thth = np.stack([-st * cp, -st * sp, -ct], axis=-1)
    s_thph = np.stack([-ct * sp, ct * cp, z], axis=-1)
    s_phph = np.stack([-st * cp, -st * sp, z], axis=-1)
    return s, s_th, s_ph, s_thth, s_thph, s_phph


def sample_sphere_params(M, seed):
    """(theta, phi) with the exact uniform measure on the sphere."""
    rng = np.random.default_rng(seed)
    theta = np.arccos(rng.uniform(-1.0, 1.0, size=M))
    phi = rng.uniform(0.0, TWO_PI, size=M)
    return theta, phi


@dataclass(frozen=True)
class MapDerivatives:
    """Position and parametric derivatives of a surface map at (theta, phi, t)."""

    x: np.ndarray
    x_th: np.ndarray
    x_ph: np.ndarray
    x_thth: np.ndarray
    x_thph: np.ndarray
    x_phph: np.ndarray


@dataclass(frozen=True)
class HomeoNetParams:
    """Trainable parameters of the surface-tracking network (N_p = 8N)."""

    W2: np.ndarray    # (3, N)
    W1: np.ndarray    # (N, 4)
    b1: np.ndarray    # (N,)

    @property
    def N(self) -> int:
        return self.W1.shape[0]

    @property
    def n_params(self) -> int:
        return self.W2.size + self.W1.size + self.b1.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W2.ravel(), self.W1.ravel(), self.b1])

    @classmethod
    def from_vector(cls, p, N):
        p = np.asarray(p)
        W2 = p[:3 * N].reshape(3, N)
        W1 = p[3 * N:7 * N].reshape(N, 4)
        b1 = p[7 * N:8 * N]
        return cls(W2, W1, b1)

    def like(self, p):
        return HomeoNetParams.from_vector(p, self.N)

    def positions(self, theta, phi, t):
        s4 = np.concatenate(
            [sphere_embed(theta, phi),
             np.broadcast_to(np.asarray(t, dtype=float),
                             np.shape(theta)).reshape(-1, 1)], axis=1)
        h0, _, _, _ = sigmoid_stack(s4 @ self.W1.T + self.b1)
        return h0 @ self.W2.T

    def derivatives(self, theta, phi, t) -> MapDerivatives:
        s, s_th, s_ph, s_thth, s_thph, s_phph = _sphere_embed_derivs(theta, phi)
        tcol = np.broadcast_to(np.asarray(t, dtype=float), s.shape[:-1])
        s4 = np.concatenate([s, tcol[..., None]], axis=-1)
        Ws = self.W1[:, :3]
        z = s4 @ self.W1.T + self.b1
        h0, h1, h2, _ = sigmoid_stack(z)
        z_th = s_th @ Ws.T
        z_ph = s_ph @ Ws.T

        def first(dz):
            return (h1 * dz) @ self.W2.T

        def second(dza, dzb, dzab):
            return (h2 * dza * dzb + h1 * dzab) @ self.W2.T

        return MapDerivatives(
            x=h0 @ self.W2.T,
            x_th=first(z_th),
            x_ph=first(z_ph),
            x_thth=second(z_th, z_th, s_thth @ Ws.T),
            x_thph=second(z_th, z_ph, s_thph @ Ws.T),
            x_phph=second(z_ph, z_ph, s_phph @ Ws.T),
        )


def init_homeo_params(N, seed) -> HomeoNetParams:
    rng = np.random.default_rng(seed)
    W2 = rng.uniform(-1.0, 1.0, size=(3, N))
    W1 = rng.uniform(-1.0, 1.0, size=(N, 4))
    b1 = rng.uniform(-1.0, 1.0, size=N)
    return HomeoNetParams(W2, W1, b1)


# ---------------------------------------------------------------------------
# exact parametric maps (initial configurations and test oracles)
# ---------------------------------------------------------------------------

class SphereMap:
    """The identity map onto the unit sphere (any t)."""

    def positions(self, theta, phi, t):
        return sphere_embed(theta, phi)

    def derivatives(self, theta, phi, t) -> MapDerivatives:
        s, s_th, s_ph, s_thth, s_thph, s_phph = _sphere_embed_derivs(theta, phi)
        return MapDerivatives(s, s_th, s_ph, s_thth, s_thph, s_phph)


class OscillatingEllipsoidMap:
    """Ellipsoid with axes (1.5 a(t), 1, 0.5) breathing along x."""

    def _scale(self, t):
        ax = 1.5 * oscillation_factor(np.asarray(t, dtype=float))
        one = np.ones_like(ax)
        return np.stack([ax, one, 0.5 * one], axis=-1)

    def positions(self, theta, phi, t):
        return sphere_embed(theta, phi) * self._scale(t)

    def derivatives(self, theta, phi, t) -> MapDerivatives:
        s, s_th, s_ph, s_thth, s_thph, s_phph = _sphere_embed_derivs(theta, phi)
        sc = self._scale(t)
        return MapDerivatives(s * sc, s_th * sc, s_ph * sc, s_thth * sc,
                              s_thph * sc, s_phph * sc)


class ShearedSphereMap:
    """Unit sphere advected by the shear flow v = (z, 0, 0)."""

    def positions(self, theta, phi, t):
        s = sphere_embed(theta, phi)
        out = s.copy()
        out[..., 0] += t * s[..., 2]
        return out

    def derivatives(self, theta, phi, t) -> MapDerivatives:
        parts = _sphere_embed_derivs(theta, phi)

        def shear(v):
            out = v.copy()
            out[..., 0] += t * v[..., 2]
            return out

        return MapDerivatives(*(shear(v) for v in parts))


# ---------------------------------------------------------------------------
# fundamental-form geometry
# ---------------------------------------------------------------------------

_CENTROID_PARAMS = sample_sphere_params(200, seed=314159)


def map_centroid(surface_map, t):
    """Mean position of a fixed 200-point sphere sample at time t."""
    th, ph = _CENTROID_PARAMS
    return surface_map.positions(th, ph, t).mean(axis=0)


@dataclass(frozen=True)
class ParametricSample:
    theta: np.ndarray
    phi: np.ndarray
    t: float
    x: np.ndarray
    x_theta: np.ndarray
    x_phi: np.ndarray
    n: np.ndarray
    H: np.ndarray


def fundamental_form_geometry(d: MapDerivatives, centroid):
    """Outward normal and mean curvature from the two fundamental forms.

    The raw normal x_theta x x_phi is flipped outward against the centroid;
    the sign of H is then fixed to the 2H = div(n) convention, giving
    H = +1 on the unit sphere.
    """
    E = np.einsum("...i,...i->...", d.x_th, d.x_th)
    F = np.einsum("...i,...i->...", d.x_th, d.x_ph)
    G = np.einsum("...i,...i->...", d.x_ph, d.x_ph)
    metric = E * G - F * F
    if np.any(metric <= 1e-14):
        raise GeometryError("degenerate parametrization: E G - F^2 ~ 0")
    raw = np.cross(d.x_th, d.x_ph)
    n = raw / np.linalg.norm(raw, axis=-1, keepdims=True)
    flip = np.einsum("...i,...i->...", n, d.x - centroid) < 0
    n = np.where(flip[..., None], -n, n)
    L = np.einsum("...i,...i->...", d.x_thth, n)
    Mf = np.einsum("...i,...i->...", d.x_thph, n)
    Nf = np.einsum("...i,...i->...", d.x_phph, n)
    H = -(E * Nf - 2.0 * F * Mf + G * L) / (2.0 * metric)
    return n, H


def surface_point_and_geometry(surface_map, theta, phi, t,
                               centroid=None) -> ParametricSample:
    """Evaluate the map and its geometry at parameters (theta, phi) and time t."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if centroid is None:
        centroid = map_centroid(surface_map, t)
    d = surface_map.derivatives(theta, phi, t)
    n, H = fundamental_form_geometry(d, centroid)
    return ParametricSample(theta, phi, t, d.x, d.x_th, d.x_ph, n, H)


def frozen_geometry(surface_map, theta, phi, times):
    """Positions, normals and curvatures at per-point times (x, n, H)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    times = np.asarray(times, dtype=float)
    d = surface_map.derivatives(theta, phi, times)
    centroids = np.empty((len(theta), 3))
    for t_val in np.unique(times):
        mask = times == t_val
        centroids[mask] = map_centroid(surface_map, float(t_val))
    n, H = fundamental_form_geometry(d, centroids)
    return d.x, n, H


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureGrid:
    """Gauss-Legendre nodes in theta on [0, pi], midpoint nodes in phi."""

    theta: np.ndarray
    w_theta: np.ndarray
    phi: np.ndarray
    w_phi: np.ndarray

    @classmethod
    def build(cls, n_theta=32, n_phi=64):
        xi, w = np.polynomial.legendre.leggauss(n_theta)
        theta = 0.5 * np.pi * (xi + 1.0)
        w_theta = 0.5 * np.pi * w
        phi = (np.arange(n_phi) + 0.5) * TWO_PI / n_phi
        w_phi = np.full(n_phi, TWO_PI / n_phi)
        return cls(theta, w_theta, phi, w_phi)


def surface_integral(surface_map, field, t, grid: QuadratureGrid) -> float:
    """Integrate field(x, n) over the surface at time t.

    The area element is sqrt(E G - F^2) dtheta dphi; ``field`` receives the
    quadrature positions (P, 3) and outward normals (P, 3).
    """
    TH, PH = np.meshgrid(grid.theta, grid.phi, indexing="ij")
    WW = np.outer(grid.w_theta, grid.w_phi)
    th, ph = TH.ravel(), PH.ravel()
    d = surface_map.derivatives(th, ph, t)
    E = np.einsum("pi,pi->p", d.x_th, d.x_th)
    F = np.einsum("pi,pi->p", d.x_th, d.x_ph)
    G = np.einsum("pi,pi->p", d.x_ph, d.x_ph)
    metric = E * G - F * F
    if np.any(metric <= 0):
        raise IntegrationError("degenerate metric inside the quadrature grid")
    centroid = map_centroid(surface_map, t)
    n, _ = fundamental_form_geometry(d, centroid)
    vals = np.asarray(field(d.x, n), dtype=float)
    return float(np.sum(WW.ravel() * vals * np.sqrt(metric)))


def droplet_volume(surface_map, t, grid: QuadratureGrid) -> float:
    """V(t) = (1/3) integral of x . n dS (divergence theorem)."""
    return surface_integral(
        surface_map, lambda x, n: np.einsum("pi,pi->p", x, n) / 3.0, t, grid)


# ---------------------------------------------------------------------------
# sequential solver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowedMap:
    """A surface net trained in window time tau = (t - t_start) / width.

    Presents the physical-time parametric-map protocol; parametric
    derivatives are unaffected by the time reparametrization.
    """

    net: HomeoNetParams
    t_start: float
    width: float

    def _tau(self, t):
        return (np.asarray(t, dtype=float) - self.t_start) / self.width

    def positions(self, theta, phi, t):
        return self.net.positions(theta, phi, self._tau(t))

    def derivatives(self, theta, phi, t) -> MapDerivatives:
        return self.net.derivatives(theta, phi, self._tau(t))


@dataclass
class IntervalSolution:
    """Trained nets of one time subinterval [t_start, t_end].

    Both networks take the normalized window time tau in [0, 1] as their
    time input; ``surface_map`` translates physical time.
    """

    t_start: float
    t_end: float
    surface_net: HomeoNetParams
    solution_net: network.ShallowNetParams | None
    surface_report: optim.TrainReport
    solution_report: optim.TrainReport | None

    @property
    def width(self) -> float:
        return self.t_end - self.t_start

    @property
    def surface_map(self) -> WindowedMap:
        return WindowedMap(self.surface_net, self.t_start, self.width)


@dataclass
class EvolvingSolution:
    intervals: list

    def interval_at(self, t) -> IntervalSolution:
        for iv in self.intervals:
            if t <= iv.t_end + 1e-12:
                return iv
        return self.intervals[-1]

    def surface_at(self, theta, phi, t):
        return self.interval_at(t).surface_map.positions(theta, phi, t)

    def solution_at(self, X, t):
        iv = self.interval_at(t)
        X = np.atleast_2d(X)
        tau = (t - iv.t_start) / iv.width
        XT = np.concatenate([X, np.full((len(X), 1), tau)], axis=1)
        return network.evaluate(iv.solution_net, XT)[:, 0]


def sequential_solve(problem, n_intervals, T, N_x, N_u, M, M0, seed=0,
                     surface_opts: optim.LMOptions = optim.LMOptions(),
                     solution_opts: optim.LMOptions = optim.LMOptions(),
                     solve_pde=True, warm_start=False,
                     surface_retry_loss=0.0) -> EvolvingSolution:
    """Track the surface and solve the PDE over n uniform subintervals.

    Per interval: (1) fit the homeomorphism net to the transport rows with
    the initial configuration resumed from the previous interval (exact map
    at t = 0); (2) freeze normals and curvatures at the training points;
    (3) fit the d = 4 solution net to the advection-diffusion rows with
    initial values resumed likewise.

    A warm-started surface fit that ends above ``surface_retry_loss`` is
    retrained from the fresh random initialization and the better of the
    two is kept (a stale basin can lose to a fresh start on intervals with
    steep dynamics).
    """
    edges = np.linspace(0.0, T, n_intervals + 1)
    vel = problem.velocity
    intervals = []
    prev = None
    rng_base = seed * 7919

    for k in range(n_intervals):
        t_lo, t_hi = edges[k], edges[k + 1]
        width = t_hi - t_lo
        th, ph = sample_sphere_params(M, seed=rng_base + 11 * k + 1)
        tau = latin_hypercube_times(M, 0.0, 1.0, seed=rng_base + 11 * k + 2)
        t_phys = t_lo + width * tau
        th0, ph0 = sample_sphere_params(M0, seed=rng_base + 11 * k + 3)

        if prev is None:
            x0_targets = problem.initial_map.positions(th0, ph0, t_lo)
        else:
            x0_targets = prev.surface_map.positions(th0, ph0, t_lo)

        template_x = init_homeo_params(N_x, seed=rng_base + 11 * k + 4)
        track_sys = residuals.build_surface_tracking_system(
            template_x, (th, ph, tau), vel, (th0, ph0), x0_targets, t0=0.0,
            times_phys=t_phys, time_scale=width, dtype=surface_opts.dtype)
        warm = warm_start and prev is not None
        if warm:
            # shift the window: tau_new = tau_old - 1 folds into the bias,
            # so the warm start reproduces the previous end state at tau = 0
            pn = prev.surface_net
            p0 = HomeoNetParams(pn.W2, pn.W1, pn.b1 + pn.W1[:, 3]).to_vector()
        else:
            p0 = template_x.to_vector()
        try:
            surf_report = optim.levenberg_marquardt(track_sys, p0, surface_opts,
                                                    seed=seed)
            if warm and surface_retry_loss and (surf_report.final_loss
                                                > surface_retry_loss):
                retry = optim.levenberg_marquardt(
                    track_sys, template_x.to_vector(), surface_opts, seed=seed)
                if retry.final_loss < surf_report.final_loss:
                    surf_report = retry
        except OptimizerStalled as exc:
            raise OptimizerStalled(
                f"surface tracking stalled on interval {k}: {exc}", exc.report
            ) from exc
        surface_net = template_x.like(surf_report.final_params)

        solution_net = None
        sol_report = None
        if solve_pde:
            # freeze geometry at the training points of this interval
            X, normals, curv = frozen_geometry(surface_net, th, ph, tau)
            v_vals = vel.v(X, t_phys)
            gv_vals = vel.grad_v(X, t_phys)
            f_vals = problem.f_at(normals, curv, X, t_phys)

            X0 = surface_net.positions(th0, ph0, 0.0)
            if prev is None or prev.solution_net is None:
                u0_vals = problem.u0_at(X0)
            else:
                XT0 = np.concatenate([X0, np.ones((M0, 1))], axis=1)
                u0_vals = network.evaluate(prev.solution_net, XT0)[:, 0]

            template_u = network.init_params(N_u, d=4, K=1,
                                             seed=rng_base + 11 * k + 5)
            pde_sys = residuals.build_evolving_pde_system(
                template_u, (X, tau, normals, curv), v_vals, gv_vals, f_vals,
                X0, u0_vals, t0=0.0, time_scale=width,
                dtype=solution_opts.dtype)
            if (warm_start and prev is not None
                    and prev.solution_net is not None):
                pn = prev.solution_net
                pu0 = network.ShallowNetParams(
                    pn.alpha, pn.W, pn.b + pn.W[:, 3]).to_vector()
            else:
                pu0 = template_u.to_vector()
            try:
                sol_report = optim.levenberg_marquardt(pde_sys, pu0,
                                                       solution_opts, seed=seed)
            except OptimizerStalled as exc:
                raise OptimizerStalled(
                    f"PDE solve stalled on interval {k}: {exc}", exc.report
                ) from exc
            solution_net = template_u.like(sol_report.final_params)

        intervals.append(IntervalSolution(t_lo, t_hi, surface_net, solution_net,
                                          surf_report, sol_report))
        prev = intervals[-1]
    return EvolvingSolution(intervals)


def latin_hypercube_times(M, t_lo, t_hi, seed):
    """One uniform draw per bin of an M-bin stratification of [t_lo, t_hi]."""
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(0.0, 1.0, size=M)
    times = t_lo + (np.arange(M) + offsets) * (t_hi - t_lo) / M
    return rng.permutation(times)


# ---------------------------------------------------------------------------
# conservation diagnostics
# ---------------------------------------------------------------------------

def conservation_report(solution: EvolvingSolution, times, grid: QuadratureGrid):
    """Relative volume and mass drift |Q(t) - Q(0)| / Q(0) along the run.

    Mass integrates the trained concentration over the tracked surface.
    Jumps at subinterval endpoints are expected: the initial data of each
    interval is resumed from the previous fit.
    """
    rows = []
    iv0 = solution.intervals[0]
    vol0 = droplet_volume(iv0.surface_map, iv0.t_start, grid)
    mass0 = surface_integral(
        iv0.surface_map,
        lambda x, n: solution.solution_at(x, iv0.t_start), iv0.t_start, grid)
    for t in times:
        iv = solution.interval_at(t)
        vol = droplet_volume(iv.surface_map, t, grid)
        mass = surface_integral(
            iv.surface_map, lambda x, n: solution.solution_at(x, t), t, grid)
        rows.append((float(t), abs(vol - vol0) / abs(vol0),
                     abs(mass - mass0) / abs(mass0)))
    return rows


def write_conservation_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "volume_rel_err", "mass_rel_err"])
        for t, v, m in rows:
            writer.writerow([f"{t:.12g}", f"{v:.12g}", f"{m:.12g}"])


def write_surface_snapshot_csv(path, solution: EvolvingSolution, t,
                               n_theta=40, n_phi=80):
    """Regular (theta, phi) display grid: theta,phi,x,y,z,H,u rows."""
    iv = solution.interval_at(t)
    th = np.linspace(1e-3, np.pi - 1e-3, n_theta)
    ph = np.linspace(0.0, TWO_PI, n_phi, endpoint=False)
    TH, PH = np.meshgrid(th, ph, indexing="ij")
    ps = surface_point_and_geometry(iv.surface_map, TH.ravel(), PH.ravel(), t)
    u = (solution.solution_at(ps.x, t) if iv.solution_net is not None
         else np.zeros(len(ps.x)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "phi", "x", "y", "z", "H", "u"])
        for i in range(len(ps.x)):
            writer.writerow([f"{TH.ravel()[i]:.9g}", f"{PH.ravel()[i]:.9g}",
                             *(f"{v:.12g}" for v in ps.x[i]),
                             f"{ps.H[i]:.12g}", f"{u[i]:.12g}"])
