"""Implicit (level-set) surface geometry.

A surface is the zero set of a twice-differentiable function psi with
hand-coded gradient and Hessian.  The unit outward normal and the mean
curvature follow from

    n = grad(psi) / |grad(psi)|,
    2H = div(n) = (tr(hess(psi)) - n^T hess(psi) n) / |grad(psi)|,

so that H = 1 on the unit sphere.  Points on a surface are produced by
drawing uniform samples in a bounding box and projecting them onto the
zero set with damped Newton steps along the gradient.
"""

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, GeometryError, ProjectionError, SamplingError

GRAD_EPS = 1e-12          # below this |grad psi| the geometry is degenerate
PROJECTION_TOL = 1e-12    # |psi| tolerance of the Newton projection
DUPLICATE_TOL = 1e-8      # pairwise distance below which samples are merged


@dataclass(frozen=True)
class LevelSetSurface:
    """Zero level set of psi with analytic first and second derivatives.

    ``psi``, ``grad_psi`` and ``hess_psi`` accept arrays of shape (..., 3)
    and return shapes (...,), (..., 3) and (..., 3, 3).  ``bbox`` is a
    (2, 3) array of lower/upper corners containing the surface.  Surfaces
    with a boundary curve carry a parametrization of that curve plus the
    extra constraint cutting the closed zero set.
    """

    name: str
    psi: Callable[[np.ndarray], np.ndarray]
    grad_psi: Callable[[np.ndarray], np.ndarray]
    hess_psi: Callable[[np.ndarray], np.ndarray]
    bbox: np.ndarray
    boundary_curve: Callable[[np.ndarray], np.ndarray] | None = None
    constraint: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def has_boundary(self) -> bool:
        return self.boundary_curve is not None


@dataclass(frozen=True)
class SurfacePoint:
    """An on-surface sample with its local geometry attached."""

    x: np.ndarray       # position on the surface
    n: np.ndarray       # unit outward normal
    H: float            # mean curvature, 2H = div(n)
    grad_norm: float    # |grad psi| at x


@dataclass(frozen=True)
class BoundaryPoint:
    x: np.ndarray


# ---------------------------------------------------------------------------
# builtin surfaces
# ---------------------------------------------------------------------------

def _sphere_psi(x):
    return np.sum(x * x, axis=-1) - 1.0


def _sphere_grad(x):
    return 2.0 * x


def _sphere_hess(x):
    h = np.zeros(x.shape + (3,))
    idx = np.arange(3)
    h[..., idx, idx] = 2.0
    return h


def ellipsoid_level_set(name, ax, ay, az, bbox_pad=0.06):
    """Axis-aligned ellipsoid (x/ax)^2 + (y/ay)^2 + (z/az)^2 - 1."""
    inv2 = np.array([1.0 / ax**2, 1.0 / ay**2, 1.0 / az**2])

    def psi(x):
        return np.sum(x * x * inv2, axis=-1) - 1.0

    def grad(x):
        return 2.0 * x * inv2

    def hess(x):
        h = np.zeros(x.shape + (3,))
        idx = np.arange(3)
        h[..., idx, idx] = 2.0 * inv2
        return h

    half = np.array([ax, ay, az]) + bbox_pad
    return LevelSetSurface(name, psi, grad, hess, np.array([-half, half]))


def _torus_psi(x):
    rho = np.hypot(x[..., 0], x[..., 1])
    return (rho - 1.0) ** 2 + x[..., 2] ** 2 - 1.0 / 16.0


def _torus_grad(x):
    rho = np.hypot(x[..., 0], x[..., 1])
    rho = np.where(rho > 0, rho, np.finfo(float).tiny)
    fac = 2.0 * (rho - 1.0) / rho
    g = np.empty_like(x)
    g[..., 0] = fac * x[..., 0]
    g[..., 1] = fac * x[..., 1]
    g[..., 2] = 2.0 * x[..., 2]
    return g


def _torus_hess(x):
    rho = np.hypot(x[..., 0], x[..., 1])
    rho = np.where(rho > 0, rho, np.finfo(float).tiny)
    xx, yy = x[..., 0], x[..., 1]
    h = np.zeros(x.shape + (3,))
    h[..., 0, 0] = 2.0 * (xx**2 / rho**2 + (rho - 1.0) * yy**2 / rho**3)
    h[..., 1, 1] = 2.0 * (yy**2 / rho**2 + (rho - 1.0) * xx**2 / rho**3)
    hxy = 2.0 * xx * yy * (1.0 / rho**2 - (rho - 1.0) / rho**3)
    h[..., 0, 1] = hxy
    h[..., 1, 0] = hxy
    h[..., 2, 2] = 2.0
    return h


def _genus2_psi(x):
    g = x[..., 0] ** 4 - x[..., 0] ** 2 + x[..., 1] ** 2
    return g * g + x[..., 2] ** 2 - 0.01


def _genus2_grad(x):
    xx, yy, zz = x[..., 0], x[..., 1], x[..., 2]
    g = xx**4 - xx**2 + yy**2
    out = np.empty_like(x)
    out[..., 0] = 2.0 * g * (4.0 * xx**3 - 2.0 * xx)
    out[..., 1] = 4.0 * g * yy
    out[..., 2] = 2.0 * zz
    return out


def _genus2_hess(x):
    xx, yy = x[..., 0], x[..., 1]
    g = xx**4 - xx**2 + yy**2
    gx = 4.0 * xx**3 - 2.0 * xx
    h = np.zeros(x.shape + (3,))
    h[..., 0, 0] = 2.0 * gx * gx + 2.0 * g * (12.0 * xx**2 - 2.0)
    h[..., 0, 1] = 4.0 * gx * yy
    h[..., 1, 0] = h[..., 0, 1]
    h[..., 1, 1] = 8.0 * yy**2 + 4.0 * g
    h[..., 2, 2] = 2.0
    return h


def _cheese_psi(x):
    xx, yy, zz = x[..., 0], x[..., 1], x[..., 2]
    return (
        (4.0 * xx**2 - 1.0) ** 2
        + (4.0 * yy**2 - 1.0) ** 2
        + (4.0 * zz**2 - 1.0) ** 2
        + 16.0 * (xx**2 + yy**2 - 1.0) ** 2
        + 16.0 * (xx**2 + zz**2 - 1.0) ** 2
        + 16.0 * (yy**2 + zz**2 - 1.0) ** 2
        - 16.0
    )


def _cheese_grad(x):
    xx, yy, zz = x[..., 0], x[..., 1], x[..., 2]
    out = np.empty_like(x)
    out[..., 0] = 16.0 * xx * (4.0 * xx**2 - 1.0) + 64.0 * xx * (
        (xx**2 + yy**2 - 1.0) + (xx**2 + zz**2 - 1.0)
    )
    out[..., 1] = 16.0 * yy * (4.0 * yy**2 - 1.0) + 64.0 * yy * (
        (xx**2 + yy**2 - 1.0) + (yy**2 + zz**2 - 1.0)
    )
    out[..., 2] = 16.0 * zz * (4.0 * zz**2 - 1.0) + 64.0 * zz * (
        (xx**2 + zz**2 - 1.0) + (yy**2 + zz**2 - 1.0)
    )
    return out


def _cheese_hess(x):
    xx, yy, zz = x[..., 0], x[..., 1], x[..., 2]
    h = np.empty(x.shape + (3,))
    h[..., 0, 0] = (
        16.0 * (4.0 * xx**2 - 1.0)
        + 384.0 * xx**2
        + 64.0 * ((xx**2 + yy**2 - 1.0) + (xx**2 + zz**2 - 1.0))
    )
    h[..., 1, 1] = (
        16.0 * (4.0 * yy**2 - 1.0)
        + 384.0 * yy**2
        + 64.0 * ((xx**2 + yy**2 - 1.0) + (yy**2 + zz**2 - 1.0))
    )
    h[..., 2, 2] = (
        16.0 * (4.0 * zz**2 - 1.0)
        + 384.0 * zz**2
        + 64.0 * ((xx**2 + zz**2 - 1.0) + (yy**2 + zz**2 - 1.0))
    )
    h[..., 0, 1] = h[..., 1, 0] = 128.0 * xx * yy
    h[..., 0, 2] = h[..., 2, 0] = 128.0 * xx * zz
    h[..., 1, 2] = h[..., 2, 1] = 128.0 * yy * zz
    return h


def _hemi_boundary_curve(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros(s.shape + (3,))
    out[..., 0] = 1.5 * np.cos(s)
    out[..., 1] = np.sin(s)
    return out


def _build_surfaces():
    surfaces = {}

    surfaces["unit_sphere"] = LevelSetSurface(
        "unit_sphere", _sphere_psi, _sphere_grad, _sphere_hess,
        np.array([[-1.1, -1.1, -1.1], [1.1, 1.1, 1.1]]),
    )
    surfaces["ellipsoid"] = ellipsoid_level_set("ellipsoid", 1.5, 1.0, 0.5)
    surfaces["torus"] = LevelSetSurface(
        "torus", _torus_psi, _torus_grad, _torus_hess,
        np.array([[-1.3, -1.3, -0.27], [1.3, 1.3, 0.27]]),
    )
    surfaces["genus2"] = LevelSetSurface(
        "genus2", _genus2_psi, _genus2_grad, _genus2_hess,
        np.array([[-1.15, -0.7, -0.12], [1.15, 0.7, 0.12]]),
    )
    surfaces["cheese"] = LevelSetSurface(
        "cheese", _cheese_psi, _cheese_grad, _cheese_hess,
        np.array([[-1.3, -1.3, -1.3], [1.3, 1.3, 1.3]]),
    )

    ell = surfaces["ellipsoid"]
    surfaces["hemi_ellipsoid"] = LevelSetSurface(
        "hemi_ellipsoid", ell.psi, ell.grad_psi, ell.hess_psi,
        np.array([[-1.56, -1.06, 0.0], [1.56, 1.06, 0.56]]),
        boundary_curve=_hemi_boundary_curve,
        constraint=lambda x: x[..., 2],
    )
    return surfaces


_SURFACES = _build_surfaces()

BUILTIN_SURFACES = tuple(sorted(_SURFACES))


def builtin_surface(name: str) -> LevelSetSurface:
    """Look up one of the builtin level-set surfaces by name."""
    try:
        return _SURFACES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown surface {name!r}; available: {', '.join(BUILTIN_SURFACES)}"
        ) from None


# ---------------------------------------------------------------------------
# normals and curvature
# ---------------------------------------------------------------------------

def normals_and_curvatures(surface: LevelSetSurface, X: np.ndarray):
    """Unit outward normals and mean curvatures at points X of shape (M, 3).

    Returns (n, H, grad_norm).  Raises GeometryError where |grad psi| is
    below GRAD_EPS.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    g = surface.grad_psi(X)
    gn = np.linalg.norm(g, axis=-1)
    bad = gn <= GRAD_EPS
    if np.any(bad):
        where = X[bad][0]
        raise GeometryError(
            f"degenerate level-set gradient on {surface.name} at {where.tolist()}"
        )
    n = g / gn[:, None]
    hess = surface.hess_psi(X)
    trace = np.trace(hess, axis1=-2, axis2=-1)
    nhn = np.einsum("mi,mij,mj->m", n, hess, n)
    H = (trace - nhn) / (2.0 * gn)
    return n, H, gn


def normal_and_curvature(surface: LevelSetSurface, x: np.ndarray):
    """Normal and mean curvature at a single point on the surface."""
    n, H, _ = normals_and_curvatures(surface, np.asarray(x, dtype=float)[None, :])
    return n[0], float(H[0])


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_batch(surface, X0, tol=PROJECTION_TOL, max_iter=100):
    """Damped Newton projection x <- x - psi * grad / |grad|^2 of many points.

    Returns (X, ok) where ok marks points with |psi| <= tol.  Steps that do
    not decrease |psi| are halved, which keeps the iteration stable near
    high-curvature folds.
    """
    X = np.array(np.atleast_2d(X0), dtype=float)
    psi = surface.psi(X)
    alive = np.abs(psi) > tol
    for _ in range(max_iter):
        if not np.any(alive):
            break
        idx = np.flatnonzero(alive)
        xa = X[idx]
        pa = psi[idx]
        g = surface.grad_psi(xa)
        gn2 = np.sum(g * g, axis=-1)
        ok_grad = gn2 > GRAD_EPS**2
        step = np.zeros_like(xa)
        step[ok_grad] = (pa[ok_grad] / gn2[ok_grad])[:, None] * g[ok_grad]
        # damped update: halve until |psi| decreases
        scale = np.ones(len(idx))
        remaining = ok_grad.copy()
        xn = xa.copy()
        pn = pa.copy()
        for _ in range(40):
            if not np.any(remaining):
                break
            trial = xa[remaining] - scale[remaining, None] * step[remaining]
            pt = surface.psi(trial)
            better = np.abs(pt) < np.abs(pa[remaining])
            sel = np.flatnonzero(remaining)
            xn[sel[better]] = trial[better]
            pn[sel[better]] = pt[better]
            remaining[sel[better]] = False
            scale[remaining] *= 0.5
        stuck = remaining | ~ok_grad
        X[idx] = xn
        psi[idx] = pn
        newly_done = np.abs(pn) <= tol
        sub = alive[idx].copy()
        sub[newly_done | stuck] = False
        alive[idx] = sub
        # points that can no longer improve stay flagged as failures
        psi[idx[stuck]] = np.inf
    ok = np.abs(psi) <= tol
    return X, ok


def project_to_surface(surface: LevelSetSurface, x0, tol=PROJECTION_TOL):
    """Project a single point onto the zero level set."""
    X, ok = project_batch(surface, np.asarray(x0, dtype=float)[None, :], tol=tol)
    if not ok[0]:
        raise ProjectionError(
            f"projection onto {surface.name} did not converge from {list(x0)}"
        )
    return X[0]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _accept_new(accepted, candidates):
    """Indices of candidates at least DUPLICATE_TOL away from accepted points
    and from each other."""
    keep = np.ones(len(candidates), dtype=bool)
    if accepted is not None and len(accepted):
        tree = cKDTree(accepted)
        near = tree.query_ball_point(candidates, r=DUPLICATE_TOL)
        keep = np.array([len(nb) == 0 for nb in near])
    cand_keep = np.flatnonzero(keep)
    if len(cand_keep) > 1:
        tree = cKDTree(candidates[cand_keep])
        for i, j in tree.query_pairs(r=DUPLICATE_TOL):
            keep[cand_keep[max(i, j)]] = False
    return np.flatnonzero(keep)


def sample_surface(surface: LevelSetSurface, M: int, seed: int,
                   tol: float = PROJECTION_TOL) -> list[SurfacePoint]:
    """Draw M points on the surface, deterministic per seed.

    Uniform bounding-box draws are projected onto the zero set; failed
    projections and near-duplicates are rejected.  For surfaces with a
    boundary only the part satisfying constraint > 0 is kept.
    """
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = surface.bbox
    pts = np.empty((0, 3))
    draws = 0
    max_draws = max(1_000_000, 4000 * M)
    while len(pts) < M:
        chunk = max(2 * (M - len(pts)), 256)
        draws += chunk
        cand = rng.uniform(lo, hi, size=(chunk, 3))
        proj, ok = project_batch(surface, cand, tol=tol)
        proj = proj[ok]
        if surface.constraint is not None and len(proj):
            proj = proj[surface.constraint(proj) > 0]
        if len(proj):
            g = surface.grad_psi(proj)
            proj = proj[np.linalg.norm(g, axis=-1) > GRAD_EPS]
        if len(proj):
            proj = proj[_accept_new(pts if len(pts) else None, proj)]
            pts = np.vstack([pts, proj]) if len(pts) else proj
        if draws >= max_draws and len(pts) < 0.001 * draws:
            raise SamplingError(
                f"sampling {surface.name}: acceptance below 0.1% after {draws} draws"
            )
    pts = pts[:M]
    n, H, gn = normals_and_curvatures(surface, pts)
    return [
        SurfacePoint(pts[i], n[i], float(H[i]), float(gn[i])) for i in range(M)
    ]


def boundary_points_from_angles(surface: LevelSetSurface, angles) -> list[BoundaryPoint]:
    if not surface.has_boundary:
        raise ConfigurationError(f"surface {surface.name} is closed, no boundary")
    pts = surface.boundary_curve(np.asarray(angles, dtype=float))
    return [BoundaryPoint(p) for p in pts]


def sample_boundary(surface: LevelSetSurface, M_b: int, seed: int) -> list[BoundaryPoint]:
    """Draw M_b points on the boundary curve, uniform in the curve parameter."""
    if M_b < 1:
        raise ConfigurationError("M_b must be >= 1")
    if not surface.has_boundary:
        raise ConfigurationError(f"surface {surface.name} is closed, no boundary")
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, 2.0 * np.pi, size=M_b)
    return boundary_points_from_angles(surface, s)


def cloud_arrays(points: list[SurfacePoint]):
    """Stack a list of SurfacePoint into (X, n, H, grad_norm) arrays."""
    X = np.array([p.x for p in points])
    n = np.array([p.n for p in points])
    H = np.array([p.H for p in points])
    gn = np.array([p.grad_norm for p in points])
    return X, n, H, gn


def write_point_cloud_csv(path, points: list[SurfacePoint]):
    """Export a point cloud as CSV with header x,y,z,nx,ny,nz,H."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "nx", "ny", "nz", "H"])
        for p in points:
            writer.writerow([*(f"{v:.17g}" for v in p.x),
                             *(f"{v:.17g}" for v in p.n),
                             f"{p.H:.17g}"])
