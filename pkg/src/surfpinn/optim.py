"""Optimizers over residual systems.

The primary trainer is a dense Levenberg-Marquardt iteration on the normal
equations with Marquardt scaling,

    (J^T J + lambda diag(J^T J)) delta = -J^T r,

accepting a step only when the loss decreases.  First-order (full-batch
ADAM) and quasi-Newton (L-BFGS with Armijo backtracking) baselines share the
same ResidualSystem interface for optimizer comparisons.
"""

import csv
import os
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, get_blas_funcs

from .errors import OptimizerStalled

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(limits=None):
        return nullcontext()

LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e12
MAX_REJECTIONS = 20


def _blas_threads():
    """BLAS thread cap for the training loops.

    The dense factorizations here are small (N_p <= ~900), where thread
    fan-out costs far more than it saves; one thread is the right default.
    """
    return int(os.environ.get("SURFPINN_BLAS_THREADS", "1"))


@dataclass(frozen=True)
class LMOptions:
    max_iter: int = 4000
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    loss_tol: float = 1e-16
    step_tol: float = 1e-14
    precision_mode: str = "double"

    @property
    def dtype(self):
        return np.float32 if self.precision_mode == "single" else np.float64


@dataclass
class TrainReport:
    final_params: np.ndarray
    loss_history: list          # (iteration, loss) per accepted iteration
    final_loss: float
    iterations: int
    wall_time_s: float
    seed: int | None = None
    stalled: bool = False
    lambda_history: list = field(default_factory=list)
    time_history: list = field(default_factory=list)

    def write_history_csv(self, path):
        """Export iter,loss,lambda,wall_time_s rows of the accepted steps."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "loss", "lambda", "wall_time_s"])
            for (it, loss), lam, wt in zip(self.loss_history, self.lambda_history,
                                           self.time_history):
                writer.writerow([it, f"{loss:.17g}", f"{lam:.6g}", f"{wt:.6g}"])


def levenberg_marquardt(system, p0, opts: LMOptions = LMOptions(),
                        seed=None) -> TrainReport:
    """Damped least squares on a ResidualSystem.

    Accepted iterations have strictly decreasing loss.  Twenty consecutive
    rejections end the run with the ``stalled`` flag; a Cholesky failure
    that persists up to the damping cap raises OptimizerStalled with the
    best report attached.
    """
    with threadpool_limits(limits=_blas_threads()):
        return _levenberg_marquardt(system, p0, opts, seed)


def _levenberg_marquardt(system, p0, opts, seed):
    dtype = opts.dtype
    t_start = time.perf_counter()
    p = np.asarray(p0, dtype=dtype).copy()
    r, J = system.residuals_and_jacobian(p)
    loss = float(r @ r)
    lam = opts.lambda0
    history = [(0, loss)]
    lam_hist = [lam]
    t_hist = [0.0]

    def _report(iterations, stalled):
        return TrainReport(p, history, history[-1][1], iterations,
                           time.perf_counter() - t_start, seed, stalled,
                           lam_hist, t_hist)

    syrk, = get_blas_funcs(("syrk",), (J,))
    dscale = None
    for it in range(1, opts.max_iter + 1):
        g = J.T @ r
        # lower triangle of J^T J; the Cholesky below reads only that part
        JTJ = syrk(1.0, J, trans=1, lower=1)
        # Marquardt scaling with More's historical-max update: directions
        # whose curvature collapses (saturated neurons) keep their earlier
        # damping instead of taking unbounded steps along dead modes.
        diag_now = np.abs(np.diag(JTJ))
        dscale = diag_now if dscale is None else np.maximum(dscale, diag_now)
        diag = np.maximum(dscale, max(1e-10 * dscale.max(), np.finfo(dtype).tiny))
        accepted = False
        rejections = 0
        diag_idx = np.diag_indices_from(JTJ)
        while not accepted:
            A = JTJ.copy()
            A[diag_idx] += lam * diag
            try:
                delta = cho_solve(cho_factor(A, lower=True, check_finite=False),
                                  -g, check_finite=False)
            except LinAlgError:
                lam *= opts.lambda_up
                if lam > LAMBDA_MAX:
                    raise OptimizerStalled(
                        f"normal equations not factorizable at lambda cap "
                        f"(iteration {it})", _report(it - 1, True))
                continue
            p_trial = p + delta
            r_trial = system.residuals(p_trial)
            loss_trial = float(r_trial @ r_trial)
            if np.isfinite(loss_trial) and loss_trial < loss:
                accepted = True
                p, loss = p_trial, loss_trial
                lam = max(lam / opts.lambda_down, LAMBDA_MIN)
            else:
                rejections += 1
                lam *= opts.lambda_up
                if rejections >= MAX_REJECTIONS or lam > LAMBDA_MAX:
                    return _report(it - 1, True)
        history.append((it, loss))
        lam_hist.append(lam)
        t_hist.append(time.perf_counter() - t_start)
        if loss <= opts.loss_tol or float(np.linalg.norm(delta)) <= opts.step_tol:
            return _report(it, False)
        r, J = system.residuals_and_jacobian(p)
    return _report(opts.max_iter, False)


@dataclass(frozen=True)
class AdamOptions:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iter: int = 4000
    precision_mode: str = "double"

    @property
    def dtype(self):
        return np.float32 if self.precision_mode == "single" else np.float64


def adam(system, p0, opts: AdamOptions = AdamOptions(), seed=None) -> TrainReport:
    """Deterministic full-batch ADAM on the scalar loss sum r_i^2."""
    with threadpool_limits(limits=_blas_threads()):
        return _adam(system, p0, opts, seed)


def _adam(system, p0, opts, seed):
    dtype = opts.dtype
    t_start = time.perf_counter()
    p = np.asarray(p0, dtype=dtype).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    history = []
    lam_hist = []
    t_hist = []
    loss = np.inf
    for it in range(1, opts.max_iter + 1):
        r, J = system.residuals_and_jacobian(p)
        loss = float(r @ r)
        if it == 1:
            history.append((0, loss))
            lam_hist.append(0.0)
            t_hist.append(0.0)
        grad = 2.0 * (J.T @ r)
        m = opts.beta1 * m + (1.0 - opts.beta1) * grad
        v = opts.beta2 * v + (1.0 - opts.beta2) * grad * grad
        mhat = m / (1.0 - opts.beta1**it)
        vhat = v / (1.0 - opts.beta2**it)
        p = p - opts.lr * mhat / (np.sqrt(vhat) + opts.eps)
        history.append((it, float(system.loss(p))))
        lam_hist.append(0.0)
        t_hist.append(time.perf_counter() - t_start)
    return TrainReport(p, history, history[-1][1], opts.max_iter,
                       time.perf_counter() - t_start, seed, False,
                       lam_hist, t_hist)


@dataclass(frozen=True)
class LBFGSOptions:
    memory: int = 10
    max_iter: int = 4000
    grad_tol: float = 1e-12
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    precision_mode: str = "double"

    @property
    def dtype(self):
        return np.float32 if self.precision_mode == "single" else np.float64


def lbfgs(system, p0, opts: LBFGSOptions = LBFGSOptions(), seed=None) -> TrainReport:
    """Limited-memory BFGS with Armijo backtracking on the scalar loss."""
    with threadpool_limits(limits=_blas_threads()):
        return _lbfgs(system, p0, opts, seed)


def _lbfgs(system, p0, opts, seed):
    dtype = opts.dtype
    t_start = time.perf_counter()
    p = np.asarray(p0, dtype=dtype).copy()

    def loss_grad(pv):
        r, J = system.residuals_and_jacobian(pv)
        return float(r @ r), 2.0 * (J.T @ r)

    loss, g = loss_grad(p)
    history = [(0, loss)]
    lam_hist = [0.0]
    t_hist = [0.0]
    s_list, y_list, rho_list = [], [], []
    stalled = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        if np.linalg.norm(g) <= opts.grad_tol:
            it -= 1
            break
        # two-loop recursion
        qv = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
            a = rho * (s @ qv)
            alphas.append(a)
            qv -= a * y
        if y_list:
            gamma = (s_list[-1] @ y_list[-1]) / (y_list[-1] @ y_list[-1])
            qv *= gamma
        for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
            qv += (a - rho * (y @ qv)) * s
        direction = -qv
        slope = g @ direction
        if slope >= 0:
            direction = -g
            slope = -(g @ g)
        step = 1.0
        ok = False
        for _ in range(opts.max_backtracks):
            p_new = p + step * direction
            loss_new = system.loss(p_new)
            if loss_new <= loss + opts.armijo_c * step * slope:
                ok = True
                break
            step *= opts.backtrack
        if not ok:
            stalled = True
            it -= 1
            break
        loss_new, g_new = loss_grad(p_new)
        s = p_new - p
        y = g_new - g
        if (s @ y) > 1e-14 * max(1.0, float(np.linalg.norm(s)) * float(np.linalg.norm(y))):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / (s @ y))
            if len(s_list) > opts.memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)
        p, loss, g = p_new, loss_new, g_new
        history.append((it, loss))
        lam_hist.append(0.0)
        t_hist.append(time.perf_counter() - t_start)
    return TrainReport(p, history, history[-1][1], it,
                       time.perf_counter() - t_start, seed, stalled,
                       lam_hist, t_hist)


OPTIMIZERS = {"lm": levenberg_marquardt, "adam": adam, "lbfgs": lbfgs}


def default_options(name: str, precision_mode: str = "double", max_iter: int = 4000):
    if name == "lm":
        return LMOptions(max_iter=max_iter, precision_mode=precision_mode)
    if name == "adam":
        return AdamOptions(max_iter=max_iter, precision_mode=precision_mode)
    if name == "lbfgs":
        return LBFGSOptions(max_iter=max_iter, precision_mode=precision_mode)
    raise ValueError(f"unknown optimizer {name!r}")


def with_max_iter(opts, max_iter):
    return replace(opts, max_iter=max_iter)
