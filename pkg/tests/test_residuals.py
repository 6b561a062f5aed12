import numpy as np
import pytest

from surfpinn import evolving, geometry, network, operators, problems, residuals, timestep
from surfpinn.errors import ConfigurationError


def fd_jacobian(system, p, h=1e-6):
    J = np.empty((system.n_residuals, len(p)))
    for k in range(len(p)):
        e = np.zeros(len(p))
        e[k] = h
        J[:, k] = (system.residuals(p + e) - system.residuals(p - e)) / (2 * h)
    return J


def assert_jacobian_consistent(system, p_draws, tol=1e-6):
    for p in p_draws:
        r, J = system.residuals_and_jacobian(p)
        assert np.array_equal(r, system.residuals(p))
        J_fd = fd_jacobian(system, p)
        scale = max(1.0, np.abs(J_fd).max())
        assert np.abs(J - J_fd).max() / scale < tol


def assert_groups_partition(system):
    spans = sorted((g.start, g.stop) for g in system.groups)
    assert spans[0][0] == 0
    for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
        assert e1 == s2
    assert spans[-1][1] == system.n_residuals


@pytest.fixture(scope="module")
def ellipsoid_cloud():
    surf = geometry.builtin_surface("ellipsoid")
    pts = geometry.sample_surface(surf, 12, seed=1)
    X, n, H, _ = geometry.cloud_arrays(pts)
    f = problems.rhs_laplace_beltrami(problems.SINCOS, n, H, X)
    return pts, X, n, H, f


def _draws(template, count=20, start=100):
    return [type(template).from_vector(
        np.random.default_rng(start + i).uniform(-1, 1, template.n_params),
        template.N, template.d, template.K).to_vector()
        for i in range(count)]


def test_lb_system_jacobian_and_loss(ellipsoid_cloud):
    pts, X, n, H, f = ellipsoid_cloud
    template = network.init_params(3, 3, 1, seed=0)
    system = residuals.build_lb_system(template, pts, f)
    assert_groups_partition(system)
    assert_jacobian_consistent(system, _draws(template))

    # sum of squares reproduces the mean-squared loss, computed independently
    p = _draws(template, count=1, start=999)[0]
    params = template.like(p)
    res = []
    for i in range(len(X)):
        b = network.evaluate_bundle(params, X[i])
        res.append(operators.laplace_beltrami(b.grad[0], b.hess[0], n[i], H[i])
                   - f[i])
    loss_direct = np.mean(np.square(res))
    assert system.loss(p) == pytest.approx(loss_direct, rel=1e-14)


def test_lb_rows_vanish_for_manufactured_solution(ellipsoid_cloud):
    # residual row formula fed with the exact solution's fields is zero
    _, X, n, H, f = ellipsoid_cloud
    sol = problems.SINCOS
    rows = operators.laplace_beltrami(sol.grad_u(X), sol.hess_u(X), n, H) - f
    assert np.max(np.abs(rows)) <= 1e-10


def test_lb_empty_points_raises():
    template = network.init_params(3, 3, 1, seed=0)
    with pytest.raises(ConfigurationError):
        residuals.build_lb_system(template, (np.zeros((0, 3)),
                                             np.zeros((0, 3)), np.zeros(0)),
                                  np.zeros(0))


def test_normal_extension_system(ellipsoid_cloud):
    pts, X, n, H, f = ellipsoid_cloud
    template = network.init_params(3, 3, 1, seed=2)
    system = residuals.build_normal_extension_system(template, pts, f)
    assert system.n_residuals == 3 * len(X)
    assert_groups_partition(system)
    assert_jacobian_consistent(system, _draws(template, start=300))

    # constant network: rows reduce to (-f, 0, 0) / sqrt(M)
    const = network.ShallowNetParams(np.array([[0.7]]),
                                     np.zeros((1, 3)), np.zeros(1))
    template1 = network.init_params(1, 3, 1, seed=0)
    system1 = residuals.build_normal_extension_system(template1, pts, f)
    r = system1.residuals(const.to_vector())
    M = len(X)
    assert np.allclose(r[:M], -f / np.sqrt(M), atol=1e-12)
    assert np.allclose(r[M:], 0.0, atol=1e-12)

    # independent loss evaluation
    p = _draws(template, count=1, start=301)[0]
    params = template.like(p)
    lap = np.empty(M)
    dn = np.empty(M)
    nhn = np.empty(M)
    for i in range(M):
        b = network.evaluate_bundle(params, X[i])
        lap[i] = np.trace(b.hess[0])
        dn[i] = b.grad[0] @ n[i]
        nhn[i] = n[i] @ b.hess[0] @ n[i]
    loss_direct = (np.mean((lap - f) ** 2) + np.mean(dn**2) + np.mean(nhn**2))
    assert system.loss(p) == pytest.approx(loss_direct, rel=1e-14)


def test_dirichlet_rows(ellipsoid_cloud):
    template = network.init_params(3, 3, 1, seed=4)
    hemi = geometry.builtin_surface("hemi_ellipsoid")
    bpts = geometry.sample_boundary(hemi, 8, seed=5)
    Xb = np.array([p.x for p in bpts])
    ub = problems.boundary_values(problems.SINEXP, Xb)
    system = residuals.build_dirichlet_system(template, Xb, ub)
    assert_jacobian_consistent(system, _draws(template, count=5, start=400))

    # rows vanish when the net interpolates the boundary values; here use
    # the trivial exact case of zero targets and a zero output layer
    zero = network.ShallowNetParams(np.zeros((1, 3)),
                                    np.ones((3, 3)), np.zeros(3))
    system0 = residuals.build_dirichlet_system(zero, Xb, np.zeros(len(Xb)))
    assert np.allclose(system0.residuals(zero.to_vector()), 0.0, atol=1e-16)

    # the Jacobian of the boundary rows is exactly the value Jacobian
    p = template.to_vector()
    _, J = system.residuals_and_jacobian(p)
    params = template.like(p)
    for i in (0, 3):
        b = network.evaluate_bundle(params, Xb[i])
        assert np.allclose(J[i] * np.sqrt(len(Xb)), b.du_dp[0], atol=1e-12)


def test_concat_systems_mismatch():
    t1 = network.init_params(3, 3, 1, seed=0)
    t2 = network.init_params(4, 3, 1, seed=0)
    pts = geometry.sample_surface(geometry.builtin_surface("unit_sphere"), 5, 1)
    X, n, H, _ = geometry.cloud_arrays(pts)
    f = np.zeros(5)
    s1 = residuals.build_lb_system(t1, pts, f)
    s2 = residuals.build_lb_system(t2, pts, f)
    with pytest.raises(ConfigurationError):
        residuals.concat_systems(s1, s2)


def test_continuous_time_system():
    surf = geometry.builtin_surface("cheese")
    pts = geometry.sample_surface(surf, 10, seed=6)
    X, n, H, _ = geometry.cloud_arrays(pts)
    rng = np.random.default_rng(7)
    t = rng.uniform(0, 1, len(X))
    XT = np.concatenate([X, t[:, None]], axis=1)
    sol = problems.SINEXP_T
    f = problems.rhs_diffusion(sol, n, H, X, t)
    X0 = X[:4]
    u0 = sol.u(X0, 0.0)
    template = network.init_params(3, 4, 1, seed=8)
    system = residuals.build_continuous_time_system(template, (XT, n, H), f,
                                                    X0, u0)
    assert system.n_residuals == len(X) + 4
    assert_groups_partition(system)
    assert_jacobian_consistent(system, _draws(template, start=500))

    # loss decomposes into the two means exactly
    p = _draws(template, count=1, start=501)[0]
    params = template.like(p)
    pde = np.empty(len(X))
    for i in range(len(X)):
        b = network.evaluate_bundle(params, XT[i])
        dt_u = b.grad[0, 3]
        lb = operators.laplace_beltrami(b.grad[0, :3], b.hess[0, :3, :3],
                                        n[i], H[i])
        pde[i] = dt_u - lb - f[i]
    vals0 = network.evaluate(params, np.concatenate(
        [X0, np.zeros((4, 1))], axis=1))[:, 0]
    loss_direct = np.mean(pde**2) + np.mean((vals0 - u0) ** 2)
    assert system.loss(p) == pytest.approx(loss_direct, rel=1e-14)

    # manufactured-solution rows vanish when assembled from exact fields
    rows = (sol.du_dt(X, t)
            - operators.laplace_beltrami(sol.grad_u(X, t), sol.hess_u(X, t),
                                         n, H) - f)
    assert np.max(np.abs(rows)) <= 1e-10


def test_discrete_rk_system():
    surf = geometry.builtin_surface("cheese")
    pts = geometry.sample_surface(surf, 7, seed=9)
    X, n, H, _ = geometry.cloud_arrays(pts)
    sol = problems.SINEXP_T
    tab = timestep.gauss_legendre_tableau(2)
    dt = 0.4
    u_n = sol.u(X, 0.0)
    f_stage = np.column_stack(
        [problems.rhs_diffusion(sol, n, H, X, c * dt) for c in tab.c])
    template = network.init_params(3, 3, tab.q + 1, seed=10)
    system = residuals.build_discrete_rk_system(template, (X, n, H), u_n, tab,
                                                dt, f_stage)
    assert system.n_residuals == (tab.q + 1) * len(X)
    assert_groups_partition(system)
    assert_jacobian_consistent(system, _draws(template, start=600))

    # dt = 0 rows enforce all outputs equal to u_n
    system0 = residuals.build_discrete_rk_system(template, (X, n, H), u_n, tab,
                                                 0.0, f_stage)
    p = template.to_vector()
    params = template.like(p)
    U = network.evaluate(params, X)
    r0 = system0.residuals(p) * np.sqrt(len(X))
    expect = np.concatenate([(U[:, j] - u_n) for j in range(tab.q)]
                            + [U[:, tab.q] - u_n])
    assert np.allclose(r0, expect, atol=1e-13)

    # stage-count mismatch
    bad = network.init_params(3, 3, tab.q, seed=0)
    with pytest.raises(ValueError):
        residuals.build_discrete_rk_system(bad, (X, n, H), u_n, tab, dt, f_stage)

    # independent loss evaluation
    p = _draws(template, count=1, start=601)[0]
    params = template.like(p)
    loss = 0.0
    M = len(X)
    for i in range(M):
        b = network.evaluate_bundle(params, X[i])
        lb = np.array([operators.laplace_beltrami(b.grad[k], b.hess[k],
                                                  n[i], H[i])
                       for k in range(tab.q + 1)])
        rhs = lb[:tab.q] + f_stage[i]
        for j in range(tab.q):
            loss += (b.u[j] - u_n[i] - dt * (tab.a[j] @ rhs)) ** 2 / M
        loss += (b.u[tab.q] - u_n[i] - dt * (tab.b @ rhs)) ** 2 / M
    assert system.loss(p) == pytest.approx(loss, rel=1e-13)


def test_tracking_system():
    om = evolving.OscillatingEllipsoidMap()
    th, ph = evolving.sample_sphere_params(9, seed=11)
    tau = np.random.default_rng(12).uniform(0, 1, 9)
    th0, ph0 = evolving.sample_sphere_params(5, seed=13)
    x0 = om.positions(th0, ph0, 0.0)
    template = evolving.init_homeo_params(3, seed=14)
    system = residuals.build_surface_tracking_system(
        template, (th, ph, tau), problems.OSCILLATING_V, (th0, ph0), x0,
        t0=0.0, times_phys=0.2 * tau, time_scale=0.2)
    assert system.n_residuals == 3 * (9 + 5)
    assert_groups_partition(system)
    draws = [evolving.init_homeo_params(3, seed=20 + i).to_vector()
             for i in range(20)]
    assert_jacobian_consistent(system, draws)

    # zero velocity and matching initial output: initial rows vanish
    net = evolving.init_homeo_params(3, seed=30)
    x0_self = net.positions(th0, ph0, 0.0)
    system0 = residuals.build_surface_tracking_system(
        template, (th, ph, tau), problems.ZERO_V, (th0, ph0), x0_self, t0=0.0)
    r = system0.residuals(net.to_vector())
    assert np.allclose(r[3 * 9:], 0.0, atol=1e-14)

    # independent loss evaluation
    p = draws[0]
    params = template.like(p)
    xt = np.empty((9, 3))
    h = 1e-6
    for i in range(9):
        xp = params.positions([th[i]], [ph[i]], tau[i] + h)[0]
        xm = params.positions([th[i]], [ph[i]], tau[i] - h)[0]
        xt[i] = (xp - xm) / (2 * h) / 0.2
    xN = params.positions(th, ph, tau)
    v = problems.OSCILLATING_V.v(xN, 0.2 * tau)
    loss_direct = (np.sum((xt - v) ** 2) / 9
                   + np.sum((params.positions(th0, ph0, 0.0) - x0) ** 2) / 5)
    assert system.loss(p) == pytest.approx(loss_direct, rel=1e-7)


def test_evolving_pde_system():
    om = evolving.OscillatingEllipsoidMap()
    th, ph = evolving.sample_sphere_params(8, seed=15)
    t = np.random.default_rng(16).uniform(0, 0.5, 8)
    X, n, H = evolving.frozen_geometry(om, th, ph, t)
    vel, sol = problems.OSCILLATING_V, problems.SINEXP_T
    f = problems.rhs_advection_diffusion(sol, vel, n, H, X, t)
    X0 = om.positions(*evolving.sample_sphere_params(4, seed=17), 0.0)
    u0 = sol.u(X0, 0.0)
    template = network.init_params(3, 4, 1, seed=18)
    system = residuals.build_evolving_pde_system(
        template, (X, t, n, H), vel.v(X, t), vel.grad_v(X, t), f, X0, u0)
    assert_groups_partition(system)
    assert_jacobian_consistent(system, _draws(template, start=700))

    # zero velocity gives exactly the continuous-time diffusion rows
    fz = problems.rhs_diffusion(sol, n, H, X, t)
    XT = np.concatenate([X, t[:, None]], axis=1)
    sys_zero_v = residuals.build_evolving_pde_system(
        template, (X, t, n, H), np.zeros_like(X),
        np.zeros(X.shape + (3,)), fz, X0, u0)
    sys_diffusion = residuals.build_continuous_time_system(
        template, (XT, n, H), fz, X0, u0)
    p = template.to_vector()
    assert np.allclose(sys_zero_v.residuals(p), sys_diffusion.residuals(p),
                       atol=1e-14)

    # manufactured oracle rows: exact fields satisfy the discrete residual
    sdiv = operators.surface_divergence(vel.grad_v(X, t), vel.div_v(X, t), n)
    rows = (sol.du_dt(X, t) + np.sum(vel.v(X, t) * sol.grad_u(X, t), axis=1)
            + sdiv * sol.u(X, t)
            - operators.laplace_beltrami(sol.grad_u(X, t), sol.hess_u(X, t),
                                         n, H) - f)
    assert np.max(np.abs(rows)) <= 1e-8


def test_single_precision_mode():
    pts = geometry.sample_surface(geometry.builtin_surface("ellipsoid"), 9,
                                  seed=19)
    X, n, H, _ = geometry.cloud_arrays(pts)
    f = problems.rhs_laplace_beltrami(problems.SINCOS, n, H, X)
    template = network.init_params(4, 3, 1, seed=20)
    system = residuals.build_lb_system(template, pts, f, dtype=np.float32)
    r, J = system.residuals_and_jacobian(template.to_vector())
    assert r.dtype == np.float32
    assert J.dtype == np.float32
