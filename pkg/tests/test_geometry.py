import numpy as np
import pytest

from surfpinn import geometry
from surfpinn.errors import ConfigurationError, ProjectionError


ALL_SURFACES = list(geometry.BUILTIN_SURFACES)


def fd_gradient(surface, X, h=1e-5):
    g = np.zeros_like(X)
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        g[:, a] = (surface.psi(X + e) - surface.psi(X - e)) / (2 * h)
    return g


def fd_hessian(surface, X, h=1e-5):
    hess = np.zeros(X.shape + (3,))
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        hess[:, :, a] = (surface.grad_psi(X + e) - surface.grad_psi(X - e)) / (2 * h)
    return hess


def random_bbox_points(surface, M, seed):
    rng = np.random.default_rng(seed)
    lo, hi = surface.bbox
    return rng.uniform(lo, hi, size=(M, 3))


def test_builtin_surface_values():
    ell = geometry.builtin_surface("ellipsoid")
    assert ell.psi(np.array([1.5, 0.0, 0.0])) == pytest.approx(0.0, abs=1e-14)
    torus = geometry.builtin_surface("torus")
    assert torus.psi(np.array([1.25, 0.0, 0.0])) == pytest.approx(0.0, abs=1e-14)
    sphere = geometry.builtin_surface("unit_sphere")
    assert sphere.psi(np.zeros(3)) == pytest.approx(-1.0)


def test_unknown_surface_raises():
    with pytest.raises(ConfigurationError):
        geometry.builtin_surface("klein_bottle")


@pytest.mark.parametrize("name", ALL_SURFACES)
def test_gradient_and_hessian_match_finite_differences(name):
    surface = geometry.builtin_surface(name)
    X = random_bbox_points(surface, 60, seed=hash(name) % 2**32)
    if name == "torus":
        # keep away from the rho = 0 axis where psi is not differentiable
        X = X[np.hypot(X[:, 0], X[:, 1]) > 0.2]
    g = surface.grad_psi(X)
    g_fd = fd_gradient(surface, X)
    scale = np.maximum(np.abs(g_fd), 1.0)
    assert np.max(np.abs(g - g_fd) / scale) < 1e-6
    h = surface.hess_psi(X)
    h_fd = fd_hessian(surface, X)
    scale = np.maximum(np.abs(h_fd), 1.0)
    assert np.max(np.abs(h - h_fd) / scale) < 1e-6


def test_normal_and_curvature_sphere_pole():
    sphere = geometry.builtin_surface("unit_sphere")
    n, H = geometry.normal_and_curvature(sphere, np.array([0.0, 0.0, 1.0]))
    assert np.allclose(n, [0.0, 0.0, 1.0], atol=1e-14)
    assert H == pytest.approx(1.0, abs=1e-14)


def test_torus_outer_equator_curvature():
    # principal curvatures 1/0.25 and 1/1.25 at the outer equator
    torus = geometry.builtin_surface("torus")
    _, H = geometry.normal_and_curvature(torus, np.array([1.25, 0.0, 0.0]))
    assert H == pytest.approx(0.5 * (4.0 + 0.8), rel=1e-12)


def fd_normal_divergence(surface, X, h=1e-5):
    """Centered-difference divergence of the unit normal field."""
    div = np.zeros(len(X))
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        for sign in (+1, -1):
            g = surface.grad_psi(X + sign * e)
            n = g / np.linalg.norm(g, axis=-1, keepdims=True)
            div += sign * n[:, a] / (2 * h)
    return div


@pytest.mark.parametrize("name", ALL_SURFACES)
def test_curvature_equals_half_divergence_of_normal(name):
    surface = geometry.builtin_surface(name)
    pts = geometry.sample_surface(surface, 1000, seed=42)
    X, _, H, _ = geometry.cloud_arrays(pts)
    H_fd = 0.5 * fd_normal_divergence(surface, X)
    scale = np.maximum(np.abs(H_fd), 1.0)
    assert np.max(np.abs(H - H_fd) / scale) < 1e-5


def test_projection_radial_cases():
    sphere = geometry.builtin_surface("unit_sphere")
    x = geometry.project_to_surface(sphere, np.array([2.0, 0.0, 0.0]))
    assert np.allclose(x, [1.0, 0.0, 0.0], atol=1e-12)
    x = geometry.project_to_surface(sphere, np.array([1.0, 1.0, 1.0]))
    assert np.allclose(x, np.ones(3) / np.sqrt(3.0), atol=1e-12)


def test_projection_cheese_and_idempotence():
    cheese = geometry.builtin_surface("cheese")
    X0 = random_bbox_points(cheese, 50, seed=3)
    X, ok = geometry.project_batch(cheese, X0)
    assert np.all(np.abs(cheese.psi(X[ok])) <= 1e-12)
    X2, ok2 = geometry.project_batch(cheese, X[ok])
    assert np.all(ok2)
    assert np.max(np.linalg.norm(X2 - X[ok], axis=1)) <= 1e-12


def test_projection_failure_raises():
    sphere = geometry.builtin_surface("unit_sphere")
    with pytest.raises(ProjectionError):
        # the center has a vanishing gradient: no Newton direction
        geometry.project_to_surface(sphere, np.zeros(3))


def test_sample_surface_determinism_and_tolerance():
    sphere = geometry.builtin_surface("unit_sphere")
    pts1 = geometry.sample_surface(sphere, 100, seed=7)
    pts2 = geometry.sample_surface(sphere, 100, seed=7)
    X1, _, _, _ = geometry.cloud_arrays(pts1)
    X2, _, _, _ = geometry.cloud_arrays(pts2)
    assert np.array_equal(X1, X2)
    assert len(pts1) == 100
    assert np.max(np.abs(np.linalg.norm(X1, axis=1) - 1.0)) <= 1e-10


def test_sample_surface_torus_separation():
    torus = geometry.builtin_surface("torus")
    pts = geometry.sample_surface(torus, 400, seed=11)
    X, _, _, _ = geometry.cloud_arrays(pts)
    assert np.all(np.abs(torus.psi(X)) <= 1e-10)
    d = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0.0
    assert d.min() >= geometry.DUPLICATE_TOL


def test_sample_surface_octant_coverage():
    sphere = geometry.builtin_surface("unit_sphere")
    pts = geometry.sample_surface(sphere, 10_000, seed=5)
    X, _, _, _ = geometry.cloud_arrays(pts)
    octant = (X[:, 0] > 0).astype(int) * 4 + (X[:, 1] > 0) * 2 + (X[:, 2] > 0)
    counts = np.bincount(octant, minlength=8) / len(X)
    assert counts.min() >= 0.09
    assert counts.max() <= 0.16


def test_sample_boundary_forced_angles():
    hemi = geometry.builtin_surface("hemi_ellipsoid")
    pts = geometry.boundary_points_from_angles(
        hemi, [0.0, np.pi / 2, np.pi, 3 * np.pi / 2])
    expected = [(1.5, 0, 0), (0, 1, 0), (-1.5, 0, 0), (0, -1, 0)]
    for p, e in zip(pts, expected):
        assert np.allclose(p.x, e, atol=1e-12)


def test_sample_boundary_on_surface_and_reproducible():
    hemi = geometry.builtin_surface("hemi_ellipsoid")
    pts = geometry.sample_boundary(hemi, 100, seed=13)
    X = np.array([p.x for p in pts])
    assert np.max(np.abs(hemi.psi(X))) <= 1e-12
    assert np.max(np.abs(X[:, 2])) <= 1e-12
    pts2 = geometry.sample_boundary(hemi, 100, seed=13)
    assert np.array_equal(X, np.array([p.x for p in pts2]))


def test_sample_boundary_closed_surface_raises():
    with pytest.raises(ConfigurationError):
        geometry.sample_boundary(geometry.builtin_surface("torus"), 10, seed=0)


def test_hemi_sampling_stays_on_upper_half():
    hemi = geometry.builtin_surface("hemi_ellipsoid")
    pts = geometry.sample_surface(hemi, 200, seed=19)
    X, _, _, _ = geometry.cloud_arrays(pts)
    assert np.all(X[:, 2] > 0)
    assert np.max(np.abs(hemi.psi(X))) <= 1e-10


def test_point_cloud_csv(tmp_path):
    sphere = geometry.builtin_surface("unit_sphere")
    pts = geometry.sample_surface(sphere, 10, seed=1)
    path = tmp_path / "cloud.csv"
    geometry.write_point_cloud_csv(path, pts)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y,z,nx,ny,nz,H"
    assert len(lines) == 11
    row = [float(v) for v in lines[1].split(",")]
    assert np.allclose(row[:3], pts[0].x)
    assert row[6] == pytest.approx(pts[0].H)


def test_surface_point_invariants():
    for name in ALL_SURFACES:
        surface = geometry.builtin_surface(name)
        pts = geometry.sample_surface(surface, 50, seed=23)
        for p in pts[:10]:
            assert abs(np.linalg.norm(p.n) - 1.0) <= 1e-12
            assert abs(surface.psi(p.x[None, :]).item()) <= 1e-10
            assert p.grad_norm > 0
