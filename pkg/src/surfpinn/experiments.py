"""Config-driven experiment runner.

Reproduces the accuracy studies at desk scale: builds a problem, samples
training and test sets, trains with the selected optimizer, and reports
per-run and averaged relative L2 test errors together with full
provenance (resolved config, seeds, loss histories).
"""

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import evolving, geometry, network, optim, problems, residuals, timestep
from .errors import ConfigurationError, MetricError

try:
    LIBRARY_VERSION = metadata.version("surfpinn")
except metadata.PackageNotFoundError:  # pragma: no cover
    LIBRARY_VERSION = "unknown"


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def relative_l2(predicted, exact) -> float:
    """||predicted - exact||_2 / ||exact||_2 over flattened samples."""
    predicted = np.asarray(predicted, dtype=float).ravel()
    exact = np.asarray(exact, dtype=float).ravel()
    if predicted.shape != exact.shape or len(exact) == 0:
        raise MetricError("relative_l2 needs equally sized, non-empty samples")
    denom = np.linalg.norm(exact)
    if denom == 0.0:
        raise MetricError("relative_l2 against a zero-norm reference")
    return float(np.linalg.norm(predicted - exact) / denom)


def shift_to_reference(evaluate, x_ref, exact_value):
    """Pin an up-to-a-constant solution at a reference point.

    Returns an evaluator x -> evaluate(x) - evaluate(x_ref) + exact_value.
    """
    x_ref = np.atleast_2d(np.asarray(x_ref, dtype=float))
    offset = float(exact_value) - float(np.asarray(evaluate(x_ref)).ravel()[0])

    def shifted(X):
        return np.asarray(evaluate(X)) + offset

    return shifted


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_FAMILIES = ("lb", "diffusion", "evolving")


@dataclass(frozen=True)
class ExperimentConfig:
    problem_id: str
    N: int = 40
    M: int = 400
    M_b: int = 0
    M0: int = 0
    M_T: int = 0
    optimizer: str = "lm"
    loss_variant: str = "surface_operator"
    precision: str = "double"
    depth: int = 1
    time_model: str = "continuous"
    q: int = 0
    dt: float = 0.0
    n_steps: int = 0
    n_intervals: int = 0
    T: float = 0.0
    N_x: int = 0
    repetitions: int = 5
    seed: int = 0
    M_test: int = 10000
    max_iter: int = 4000
    loss_tol: float = 1e-16
    max_iter_solution: int = 0      # 0: same as max_iter (evolving runs)
    loss_tol_solution: float = 0.0  # 0: same as loss_tol (evolving runs)
    surface_retry_loss: float = 0.0
    warm_start: bool = False
    output_dir: str | None = None

    @property
    def family(self) -> str:
        return self.problem_id.split("/")[0]

    def validate(self):
        if self.family not in _FAMILIES:
            raise ConfigurationError(f"unknown problem family in {self.problem_id!r}")
        for name in ("N", "M", "repetitions", "M_test", "max_iter"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.optimizer not in optim.OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_variant not in ("surface_operator", "normal_extension"):
            raise ConfigurationError(f"unknown loss variant {self.loss_variant!r}")
        if self.loss_variant == "normal_extension" and self.family != "lb":
            raise ConfigurationError(
                "normal_extension loss is only defined for stationary problems")
        if self.precision not in ("double", "single"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        if self.depth not in (1, 2):
            raise ConfigurationError("depth must be 1 or 2")
        if self.family == "diffusion":
            if self.time_model not in ("continuous", "discrete"):
                raise ConfigurationError(f"unknown time model {self.time_model!r}")
            if self.time_model == "discrete" and (self.q < 1 or self.n_steps < 1
                                                  or self.dt <= 0):
                raise ConfigurationError("discrete model needs q, dt, n_steps")
            if self.time_model == "continuous" and (self.M_T < 1 or self.M0 < 1
                                                    or self.T <= 0):
                raise ConfigurationError("continuous model needs M_T, M0, T")
        if self.family == "evolving" and (self.n_intervals < 1 or self.T <= 0
                                          or self.M0 < 1 or self.N_x < 1):
            raise ConfigurationError("evolving runs need n_intervals, T, M0, N_x")
        problems.get_problem(self.problem_id)

    def run_seed(self, run_index: int) -> int:
        return self.seed * 100003 + 101 * run_index + 17


def _seed_stream(run_seed):
    """Deterministic sub-seeds: sampling, init, test, extra."""
    return (run_seed * 11 + 1, run_seed * 11 + 3, run_seed * 11 + 5,
            run_seed * 11 + 7)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS = {
    "table1": (
        "ellipsoid Laplace-Beltrami, optimizer and loss comparison headline",
        ExperimentConfig("lb/ellipsoid/sincos", N=40, M=400),
    ),
    "table2": (
        "ellipsoid precision study headline (neuron sweep via --set N=...)",
        ExperimentConfig("lb/ellipsoid/sincos", N=40, M=400),
    ),
    "table3": (
        "ellipsoid training-point study, sparse end (M = 100)",
        ExperimentConfig("lb/ellipsoid/sincos", N=40, M=100),
    ),
    "table4": (
        "ellipsoid two-hidden-layer depth study",
        ExperimentConfig("lb/ellipsoid/sincos", N=40, M=400, depth=2),
    ),
    "table5": (
        "hemi-ellipsoid with Dirichlet boundary penalty",
        ExperimentConfig("lb/hemi_ellipsoid/sinexp", N=40, M=400, M_b=100),
    ),
    "table6": (
        "complex-surface Laplace-Beltrami (cheese headline)",
        ExperimentConfig("lb/cheese/sinexp", N=60, M=400),
    ),
    "table7-continuous": (
        "cheese diffusion to T = 1, continuous-time model",
        ExperimentConfig("diffusion/cheese/sinexp", N=60, M_T=800, M0=100,
                         T=1.0, time_model="continuous", max_iter=4000),
    ),
    "table7-discrete": (
        "cheese diffusion to T = 1, 6-stage Runge-Kutta, dt = 1",
        ExperimentConfig("diffusion/cheese/sinexp", N=60, M=200, q=6, dt=1.0,
                         n_steps=1, time_model="discrete", max_iter=4000),
    ),
    "table8": (
        "oscillating ellipsoid surface tracking to T = 2",
        ExperimentConfig("evolving/oscillating/sinexp", N=40, N_x=40, M=800,
                         M0=100, T=2.0, n_intervals=10, max_iter=4000,
                         loss_tol=1e-11, max_iter_solution=1500,
                         loss_tol_solution=1e-9, surface_retry_loss=5e-10,
                         warm_start=True),
    ),
    "table9": (
        "advection-diffusion on the oscillating ellipsoid to T = 2",
        ExperimentConfig("evolving/oscillating/sinexp", N=40, N_x=40, M=800,
                         M0=100, T=2.0, n_intervals=10, max_iter=4000,
                         loss_tol=1e-11, max_iter_solution=1500,
                         loss_tol_solution=1e-9, surface_retry_loss=5e-10,
                         warm_start=True),
    ),
    "fig4-heating": (
        "heating a cheese surface: 4-stage RK, dt = 0.1, loss-gated",
        ExperimentConfig("diffusion/cheese/bump", N=100, M=500, q=4, dt=0.1,
                         n_steps=10, time_model="discrete", repetitions=1,
                         max_iter=3000, loss_tol=1e-9, warm_start=True),
    ),
    "fig7-shear-conservation": (
        "sheared droplet to T = 3 with volume and mass diagnostics",
        ExperimentConfig("evolving/shear/uniform", N=100, N_x=50, M=1000,
                         M0=500, T=3.0, n_intervals=10, repetitions=1,
                         max_iter=2500, loss_tol=1e-11, max_iter_solution=1500,
                         loss_tol_solution=1e-10, surface_retry_loss=5e-10,
                         warm_start=True),
    ),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name][1]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None


# ---------------------------------------------------------------------------
# per-run workers
# ---------------------------------------------------------------------------

def _optimizer_options(config: ExperimentConfig):
    opts = optim.default_options(config.optimizer, config.precision,
                                 config.max_iter)
    if config.optimizer == "lm":
        opts = replace(opts, loss_tol=config.loss_tol)
    return opts


def _train(config, system, p0, run_seed):
    trainer = optim.OPTIMIZERS[config.optimizer]
    return trainer(system, p0, _optimizer_options(config), seed=run_seed)


def _projection_tol(config):
    return 1e-12 if config.precision == "double" else 1e-6


def _run_stationary(config: ExperimentConfig, run_seed: int):
    sample_seed, init_seed, test_seed, extra_seed = _seed_stream(run_seed)
    problem = problems.get_problem(config.problem_id)
    surf, sol = problem.surface, problem.solution

    points = geometry.sample_surface(surf, config.M, sample_seed,
                                     tol=_projection_tol(config))
    X, normals, curv = residuals._point_arrays(points)
    f = problems.rhs_laplace_beltrami(sol, normals, curv, X)
    dtype = np.float32 if config.precision == "single" else np.float64

    if config.depth == 2:
        template = network.init_two_layer_params(config.N, 3, 1, seed=init_seed)
    else:
        template = network.init_params(config.N, 3, 1, seed=init_seed)

    if config.loss_variant == "normal_extension":
        system = residuals.build_normal_extension_system(template, points, f,
                                                         dtype=dtype)
    else:
        system = residuals.build_lb_system(template, points, f, dtype=dtype)

    pinned = False
    if surf.has_boundary:
        if config.M_b < 1:
            raise ConfigurationError("hemi surface runs need M_b >= 1")
        bpts = geometry.sample_boundary(surf, config.M_b, extra_seed)
        Xb = np.array([p.x for p in bpts])
        ub = problems.boundary_values(sol, Xb)
        system = residuals.concat_systems(
            system, residuals.build_dirichlet_system(template, Xb, ub,
                                                     dtype=dtype))
        pinned = True

    report = _train(config, system, template.to_vector(), run_seed)
    params = template.like(report.final_params)

    test_pts = geometry.sample_surface(surf, config.M_test, test_seed)
    Xt = np.array([p.x for p in test_pts])
    exact = sol.u(Xt)
    if config.depth == 2:
        predict = lambda XX: network.evaluate_two_layer(params, XX)[:, 0]
    else:
        predict = lambda XX: network.evaluate(params, XX)[:, 0]
    if pinned:
        pred = predict(Xt)
    else:
        pred = shift_to_reference(predict, Xt[0], exact[0])(Xt)
    return {"errors": {"u": relative_l2(pred, exact)}}, report


def _run_diffusion_continuous(config: ExperimentConfig, run_seed: int):
    sample_seed, init_seed, test_seed, extra_seed = _seed_stream(run_seed)
    problem = problems.get_problem(config.problem_id)
    surf, sol = problem.surface, problem.solution

    pts = geometry.sample_surface(surf, config.M_T, sample_seed,
                                  tol=_projection_tol(config))
    X, normals, curv = residuals._point_arrays(pts)
    t = evolving.latin_hypercube_times(config.M_T, 0.0, config.T,
                                       seed=extra_seed)
    XT = np.concatenate([X, t[:, None]], axis=1)
    f = problem.f_at(normals, curv, X, t)

    init_pts = geometry.sample_surface(surf, config.M0, sample_seed + 999,
                                       tol=_projection_tol(config))
    X0 = np.array([p.x for p in init_pts])
    u0 = problem.u0_at(X0)

    dtype = np.float32 if config.precision == "single" else np.float64
    template = network.init_params(config.N, 4, 1, seed=init_seed)
    system = residuals.build_continuous_time_system(
        template, (XT, normals, curv), f, X0, u0, t0=0.0, dtype=dtype)
    report = _train(config, system, template.to_vector(), run_seed)
    params = template.like(report.final_params)

    test_pts = geometry.sample_surface(surf, config.M_test, test_seed)
    Xt = np.array([p.x for p in test_pts])
    XTt = np.concatenate([Xt, np.full((len(Xt), 1), config.T)], axis=1)
    pred = network.evaluate(params, XTt)[:, 0]
    exact = sol.u(Xt, config.T)
    return {"errors": {"u": relative_l2(pred, exact)}}, report


def _run_diffusion_discrete(config: ExperimentConfig, run_seed: int):
    sample_seed, init_seed, test_seed, _ = _seed_stream(run_seed)
    problem = problems.get_problem(config.problem_id)
    surf, sol = problem.surface, problem.solution

    pts = geometry.sample_surface(surf, config.M, sample_seed,
                                  tol=_projection_tol(config))
    X, normals, curv = residuals._point_arrays(pts)
    u0 = problem.u0_at(X)

    def source(XX, tt):
        nn, hh = normals, curv
        if XX is not X:
            nn, hh, _ = geometry.normals_and_curvatures(surf, XX)
        return problem.f_at(nn, hh, XX, tt)

    opts = _optimizer_options(config)
    if config.optimizer != "lm":
        raise ConfigurationError("the discrete-time model trains with LM only")
    u_final, reports, params_list = timestep.solve_diffusion_discrete(
        (X, normals, curv), u0, source, config.q, config.dt, config.n_steps,
        config.N, seed=init_seed, opts=opts, warm_start=config.warm_start)

    step_losses = [r.final_loss for r in reports]
    record = {"errors": {}, "step_losses": step_losses}
    if sol is not None:
        T = config.dt * config.n_steps
        test_pts = geometry.sample_surface(surf, config.M_test, test_seed)
        Xt = np.array([p.x for p in test_pts])
        pred = network.evaluate(params_list[-1], Xt)[:, config.q]
        exact = sol.u(Xt, T)
        record["errors"]["u"] = relative_l2(pred, exact)
    return record, reports[-1]


def _run_evolving(config: ExperimentConfig, run_seed: int):
    _, init_seed, test_seed, _ = _seed_stream(run_seed)
    problem = problems.get_problem(config.problem_id)
    lm_opts = _optimizer_options(config)
    if config.optimizer != "lm":
        raise ConfigurationError("evolving runs train with LM only")
    sol_opts = replace(
        lm_opts,
        max_iter=config.max_iter_solution or config.max_iter,
        loss_tol=config.loss_tol_solution or config.loss_tol)

    solution = evolving.sequential_solve(
        problem, config.n_intervals, config.T, N_x=config.N_x, N_u=config.N,
        M=config.M, M0=config.M0, seed=run_seed,
        surface_opts=lm_opts, solution_opts=sol_opts,
        warm_start=config.warm_start,
        surface_retry_loss=config.surface_retry_loss)

    th, ph = evolving.sample_sphere_params(config.M_test, seed=test_seed)
    T = config.T
    exact_map = problem.exact_map
    exact = evolving.surface_point_and_geometry(exact_map, th, ph, T)
    last = solution.intervals[-1]
    pred = evolving.surface_point_and_geometry(last.surface_map, th, ph, T)

    errors = {
        "x": relative_l2(pred.x, exact.x),
        "n": relative_l2(pred.n, exact.n),
        "H": relative_l2(pred.H, exact.H),
    }
    record = {"errors": errors}
    if problem.solution is not None and last.solution_net is not None:
        u_pred = solution.solution_at(pred.x, T)
        u_exact = problem.solution.u(exact.x, T)
        errors["u"] = relative_l2(u_pred, u_exact)
    elif last.solution_net is not None:
        grid = evolving.QuadratureGrid.build(32, 64)
        times = np.linspace(0.0, T, 6 * config.n_intervals + 1)
        rows = evolving.conservation_report(solution, times, grid)
        record["conservation"] = rows
        errors["volume_drift"] = max(r[1] for r in rows)
        errors["mass_drift"] = max(r[2] for r in rows)
    return record, (solution, last.solution_report or last.surface_report)


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

@dataclass
class ErrorReport:
    config: dict
    library_version: str
    runs: list
    mean_errors: dict
    median_errors: dict
    failures: int
    warnings: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _aggregate(runs):
    keys = sorted({k for r in runs if not r["failed"] for k in r["errors"]})
    mean_errors, median_errors = {}, {}
    for k in keys:
        vals = [r["errors"][k] for r in runs if not r["failed"] and k in r["errors"]]
        if vals:
            mean_errors[k] = float(np.mean(vals))
            median_errors[k] = float(statistics.median(vals))
    return mean_errors, median_errors


def run_experiment(config: ExperimentConfig) -> ErrorReport:
    """Run all repetitions of a config and write the report artifacts."""
    config.validate()
    family = config.family
    if family == "lb":
        worker = _run_stationary
    elif family == "diffusion":
        worker = (_run_diffusion_continuous if config.time_model == "continuous"
                  else _run_diffusion_discrete)
    else:
        worker = _run_evolving

    runs = []
    warnings = []
    artifacts = []
    for r in range(config.repetitions):
        run_seed = config.run_seed(r)
        record = {"run": r, "seed": run_seed, "failed": False,
                  "error_message": None, "errors": {}}
        try:
            result, extra = worker(config, run_seed)
            record.update(result)
            report = extra[1] if isinstance(extra, tuple) else extra
            record["final_loss"] = report.final_loss
            record["iterations"] = report.iterations
            record["wall_time_s"] = report.wall_time_s
            record["stalled"] = report.stalled
            artifacts.append((r, extra))
        except Exception as exc:  # noqa: BLE001 - report and continue
            record["failed"] = True
            record["error_message"] = f"{type(exc).__name__}: {exc}"
            warnings.append(f"run {r} failed: {record['error_message']}")
        runs.append(record)

    mean_errors, median_errors = _aggregate(runs)
    report = ErrorReport(
        config=asdict(config),
        library_version=LIBRARY_VERSION,
        runs=runs,
        mean_errors=mean_errors,
        median_errors=median_errors,
        failures=sum(1 for r in runs if r["failed"]),
        warnings=warnings,
    )
    if config.output_dir:
        _write_artifacts(config, report, artifacts)
    return report


def _write_artifacts(config, report, artifacts):
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())

    with open(out / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        keys = sorted(report.mean_errors)
        writer.writerow(["run", "seed", "failed", *keys,
                         "final_loss", "iterations", "wall_time_s"])
        for rec in report.runs:
            writer.writerow(
                [rec["run"], rec["seed"], rec["failed"],
                 *(rec["errors"].get(k, "") for k in keys),
                 rec.get("final_loss", ""), rec.get("iterations", ""),
                 rec.get("wall_time_s", "")])

    for r, extra in artifacts:
        if r != 0:
            continue
        if config.family == "evolving":
            solution, train_report = extra
            train_report.write_history_csv(out / "loss_run0.csv")
            evolving.write_surface_snapshot_csv(out / "surface_T.csv",
                                                solution, config.T)
            rows = None
            for rec in report.runs:
                rows = rec.get("conservation")
            if rows:
                evolving.write_conservation_csv(out / "conservation.csv", rows)
        else:
            train_report = extra[1] if isinstance(extra, tuple) else extra
            train_report.write_history_csv(out / "loss_run0.csv")
            surf = problems.get_problem(config.problem_id).surface
            pts = geometry.sample_surface(
                surf, min(config.M, 2000), config.run_seed(0) * 11 + 1)
            geometry.write_point_cloud_csv(out / "points_run0.csv", pts)

    # conservation rows are bulky inside JSON; strip them from the echo
    for rec in report.runs:
        rec.pop("conservation", None)
    (out / "report.json").write_text(report.to_json())
