import numpy as np
import pytest

from surfpinn import evolving, geometry, optim, problems
from surfpinn.errors import GeometryError


def test_sphere_embed_special_points():
    assert np.allclose(evolving.sphere_embed(0.0, 1.234), [0, 0, 1], atol=1e-16)
    assert np.allclose(evolving.sphere_embed(np.pi / 2, 0.0), [1, 0, 0],
                       atol=1e-15)
    rng = np.random.default_rng(0)
    th = rng.uniform(0, np.pi, 100)
    ph = rng.uniform(-10, 10, 100)
    s = evolving.sphere_embed(th, ph)
    assert np.max(np.abs(np.linalg.norm(s, axis=1) - 1.0)) < 1e-14


def test_sample_sphere_params_statistics():
    th, ph = evolving.sample_sphere_params(10_000, seed=3)
    z = np.cos(th)
    assert abs(z.mean()) <= 0.02
    upper = np.mean(z > 0)
    assert 0.48 <= upper <= 0.52
    th2, ph2 = evolving.sample_sphere_params(10_000, seed=3)
    assert np.array_equal(th, th2) and np.array_equal(ph, ph2)


def test_homeo_net_periodicity_and_poles():
    net = evolving.init_homeo_params(7, seed=1)
    th = np.array([0.4, 1.1, 2.0])
    out0 = net.positions(th, np.zeros(3), 0.3)
    out2pi = net.positions(th, np.full(3, 2 * np.pi), 0.3)
    assert np.array_equal(out0, out2pi)
    # pole value independent of phi
    pole1 = net.positions(np.zeros(2), np.array([0.7, 2.9]), 0.3)
    assert np.array_equal(pole1[0], pole1[1])


def test_homeo_param_count_and_roundtrip():
    net = evolving.init_homeo_params(40, seed=2)
    assert net.n_params == 8 * 40
    back = evolving.HomeoNetParams.from_vector(net.to_vector(), 40)
    assert np.array_equal(back.W1, net.W1)
    assert np.array_equal(back.W2, net.W2)


def test_homeo_derivatives_match_fd():
    net = evolving.init_homeo_params(5, seed=4)
    th, ph, t = 1.1, 2.3, 0.7
    d = net.derivatives(np.array([th]), np.array([ph]), t)
    h = 1e-6

    def pos(a, b):
        return net.positions(np.array([a]), np.array([b]), t)[0]

    fd_th = (pos(th + h, ph) - pos(th - h, ph)) / (2 * h)
    fd_ph = (pos(th, ph + h) - pos(th, ph - h)) / (2 * h)
    assert np.max(np.abs(d.x_th[0] - fd_th)) < 1e-8
    assert np.max(np.abs(d.x_ph[0] - fd_ph)) < 1e-8
    h = 1e-4  # second differences need a larger step against cancellation
    fd_thth = (pos(th + h, ph) - 2 * pos(th, ph) + pos(th - h, ph)) / h**2
    fd_phph = (pos(th, ph + h) - 2 * pos(th, ph) + pos(th, ph - h)) / h**2
    fd_thph = (pos(th + h, ph + h) - pos(th + h, ph - h)
               - pos(th - h, ph + h) + pos(th - h, ph - h)) / (4 * h**2)
    assert np.max(np.abs(d.x_thth[0] - fd_thth)) < 1e-6
    assert np.max(np.abs(d.x_thph[0] - fd_thph)) < 1e-6
    assert np.max(np.abs(d.x_phph[0] - fd_phph)) < 1e-6


def test_fundamental_forms_unit_sphere():
    sm = evolving.SphereMap()
    th, ph = evolving.sample_sphere_params(200, seed=5)
    ps = evolving.surface_point_and_geometry(sm, th, ph, 0.0)
    assert np.max(np.abs(ps.H - 1.0)) < 1e-10
    assert np.max(np.abs(ps.n - ps.x)) < 1e-12
    # normals orthogonal to both tangent vectors
    assert np.max(np.abs(np.einsum("ij,ij->i", ps.n, ps.x_theta))) < 1e-10
    assert np.max(np.abs(np.einsum("ij,ij->i", ps.n, ps.x_phi))) < 1e-10
    assert np.max(np.abs(np.linalg.norm(ps.n, axis=1) - 1.0)) < 1e-12


def test_fundamental_forms_cross_validate_level_set():
    # the two curvature pipelines agree on the static ellipsoid (t = 0)
    om = evolving.OscillatingEllipsoidMap()
    ell = geometry.builtin_surface("ellipsoid")
    th, ph = evolving.sample_sphere_params(200, seed=6)
    ps = evolving.surface_point_and_geometry(om, th, ph, 0.0)
    n_ls, H_ls, _ = geometry.normals_and_curvatures(ell, ps.x)
    assert np.max(np.abs(ps.H - H_ls)) < 1e-8
    assert np.max(np.abs(ps.n - n_ls)) < 1e-8
    # spot value cited from the level-set side at the equator point
    ps_eq = evolving.surface_point_and_geometry(
        om, np.array([np.pi / 2]), np.array([0.0]), 0.0)
    _, H_eq = geometry.normal_and_curvature(ell, np.array([1.5, 0.0, 0.0]))
    assert ps_eq.H[0] == pytest.approx(H_eq, abs=1e-8)


def test_sheared_sphere_map_against_level_set():
    sh = evolving.ShearedSphereMap()
    th, ph = evolving.sample_sphere_params(100, seed=7)
    t = 1.7
    ps = evolving.surface_point_and_geometry(sh, th, ph, t)
    # level set (x - t z)^2 + y^2 + z^2 - 1 of the sheared droplet
    psi = (ps.x[:, 0] - t * ps.x[:, 2]) ** 2 + ps.x[:, 1] ** 2 + ps.x[:, 2] ** 2 - 1
    assert np.max(np.abs(psi)) < 1e-12


def test_degenerate_metric_raises():
    sm = evolving.SphereMap()
    with pytest.raises(GeometryError):
        evolving.surface_point_and_geometry(sm, np.zeros(1), np.zeros(1), 0.0)


def test_quadrature_grid_weights():
    grid = evolving.QuadratureGrid.build(32, 64)
    assert np.all(grid.w_theta > 0) and np.all(grid.w_phi > 0)
    assert np.sum(grid.w_theta) == pytest.approx(np.pi, abs=1e-13)
    assert np.sum(grid.w_phi) == pytest.approx(2 * np.pi, abs=1e-13)


def test_surface_integrals_on_unit_sphere():
    sm = evolving.SphereMap()
    grid = evolving.QuadratureGrid.build(32, 64)
    area = evolving.surface_integral(sm, lambda x, n: np.ones(len(x)), 0.0, grid)
    assert area == pytest.approx(4 * np.pi, abs=1e-10)
    vol = evolving.droplet_volume(sm, 0.0, grid)
    assert vol == pytest.approx(4 * np.pi / 3, abs=1e-10)
    mass = evolving.surface_integral(sm, lambda x, n: np.ones(len(x)), 0.0, grid)
    assert mass == pytest.approx(4 * np.pi, abs=1e-10)


def test_quadrature_spectral_convergence():
    sm = evolving.SphereMap()
    errs = []
    for n_theta in (8, 16, 32):
        grid = evolving.QuadratureGrid.build(n_theta, 64)
        area = evolving.surface_integral(sm, lambda x, n: np.ones(len(x)),
                                         0.0, grid)
        errs.append(abs(area - 4 * np.pi))
    assert errs[-1] <= 1e-12
    assert errs[0] <= 1e-6  # already tiny at 8 nodes: smooth integrand


def test_volume_conserved_under_shear():
    # the shear flow is incompressible: V(t) = 4 pi / 3 for the exact map
    sh = evolving.ShearedSphereMap()
    grid = evolving.QuadratureGrid.build(32, 64)
    for t in (0.0, 1.0, 3.0):
        vol = evolving.droplet_volume(sh, t, grid)
        assert vol == pytest.approx(4 * np.pi / 3, rel=1e-10)


def test_latin_hypercube_stratification():
    times = evolving.latin_hypercube_times(50, 0.0, 2.0, seed=8)
    bins = np.floor(np.sort(times) / (2.0 / 50)).astype(int)
    assert np.array_equal(bins, np.arange(50))
    times2 = evolving.latin_hypercube_times(50, 0.0, 2.0, seed=8)
    assert np.array_equal(times, times2)


def test_windowed_map_translates_time():
    net = evolving.init_homeo_params(6, seed=9)
    wm = evolving.WindowedMap(net, t_start=1.0, width=0.5)
    th, ph = evolving.sample_sphere_params(5, seed=10)
    direct = net.positions(th, ph, 0.5)
    assert np.allclose(wm.positions(th, ph, 1.25), direct)


def test_sequential_solve_zero_velocity_keeps_surface():
    """With v = 0 the tracked sphere stays put and u relaxes diffusively."""
    problem = problems.EvolvingProblem(
        "evolving/static/sinexp", problems.ZERO_V, problems.SINEXP_T,
        initial_map=evolving.SphereMap(), exact_map=evolving.SphereMap())
    opts = optim.LMOptions(max_iter=250, loss_tol=1e-12)
    sol = evolving.sequential_solve(problem, 1, 0.2, N_x=20, N_u=20, M=250,
                                    M0=60, seed=3, surface_opts=opts,
                                    solution_opts=opts)
    th, ph = evolving.sample_sphere_params(500, seed=11)
    pred = sol.surface_at(th, ph, 0.2)
    exact = evolving.sphere_embed(th, ph)
    err = np.linalg.norm(pred - exact) / np.linalg.norm(exact)
    assert err < 5e-4
    assert len(sol.intervals) == 1


def test_conservation_report_exact_initial_data():
    # built directly from one trained interval of the shear problem
    problem = problems.get_problem("evolving/shear/uniform")
    opts = optim.LMOptions(max_iter=200, loss_tol=1e-12)
    sol = evolving.sequential_solve(problem, 1, 0.3, N_x=20, N_u=24, M=300,
                                    M0=80, seed=5, surface_opts=opts,
                                    solution_opts=opts)
    grid = evolving.QuadratureGrid.build(24, 48)
    rows = evolving.conservation_report(sol, [0.0, 0.15, 0.3], grid)
    assert rows[0][1] <= 1e-10 and rows[0][2] <= 1e-10  # t = 0 vs itself
    assert all(r[1] < 5e-3 and r[2] < 5e-3 for r in rows)


def test_conservation_csv_and_snapshot(tmp_path):
    problem = problems.get_problem("evolving/shear/uniform")
    opts = optim.LMOptions(max_iter=150, loss_tol=1e-12)
    sol = evolving.sequential_solve(problem, 1, 0.2, N_x=16, N_u=20, M=220,
                                    M0=60, seed=6, surface_opts=opts,
                                    solution_opts=opts)
    grid = evolving.QuadratureGrid.build(16, 32)
    rows = evolving.conservation_report(sol, np.linspace(0, 0.2, 5), grid)
    path = tmp_path / "cons.csv"
    evolving.write_conservation_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "t,volume_rel_err,mass_rel_err"
    assert len(lines) == 6

    snap = tmp_path / "snap.csv"
    evolving.write_surface_snapshot_csv(snap, sol, 0.2, n_theta=6, n_phi=8)
    lines = snap.read_text().strip().splitlines()
    assert lines[0] == "theta,phi,x,y,z,H,u"
    assert len(lines) == 49
