"""Bounded least-squares fitting of skeleton parameters with constraint retries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .constraints import ConstraintSet, DataStats, check
from .expr import (
    DEFAULT_GUARD,
    MAX_NPARAMS,
    EvalGuard,
    EvaluationError,
    Expression,
    GuardViolation,
    compile_expr,
    evaluate,
    evaluate_fast,
    free_vars,
    param_indices,
)

UPPER_CAP = 1e6
PARAMS_INIT = 1.0
_PENALTY = 1e300


@dataclass(frozen=True)
class FitConfig:
    bounds: tuple = (0.0, UPPER_CAP)
    init: tuple = (PARAMS_INIT,) * MAX_NPARAMS
    max_iterations: int = 500
    grad_step: float = 1e-7
    tol: float = 1e-12
    restart_range: tuple = (0.0, 2.0)

    def __post_init__(self):
        lo, hi = self.bound_arrays()
        if np.any(lo > hi):
            raise ValueError("bounds must satisfy lower <= upper")
        init = np.asarray(self.init, dtype=float)
        if init.shape != (MAX_NPARAMS,):
            raise ValueError(f"init must have {MAX_NPARAMS} entries")
        if np.any(init < lo) or np.any(init > hi):
            raise ValueError("init must lie within bounds")

    def bound_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        b = np.asarray(self.bounds, dtype=float)
        if b.shape == (2,):
            b = np.tile(b, (MAX_NPARAMS, 1))
        if b.shape != (MAX_NPARAMS, 2):
            raise ValueError("bounds must be one (lo, hi) pair or one pair per parameter")
        return b[:, 0].copy(), b[:, 1].copy()

    @classmethod
    def symmetric(cls, cap: float = UPPER_CAP, **kw) -> "FitConfig":
        """Bounds [-cap, cap] for users who prefer signed parameters."""
        return cls(bounds=(-cap, cap), **kw)


@dataclass(frozen=True, eq=False)
class FitResult:
    params: np.ndarray
    mse: float
    iterations: int
    converged: bool
    restarts_used: int = 0
    feasible: bool = True
    history: tuple = field(default=(), repr=False)


class _Objective:
    """Train MSE over the used parameter slots with best-point tracking."""

    def __init__(self, expr: Expression, table, y: np.ndarray, base: np.ndarray, used: list[int]):
        self.fn = compile_expr(expr)
        self.table = table
        self.y = y
        self.base = base
        self.used = used
        self.best_f = np.inf
        self.best_theta = None

    def full(self, theta: np.ndarray) -> np.ndarray:
        p = self.base.copy()
        p[self.used] = theta
        return p

    def predict(self, theta: np.ndarray) -> np.ndarray | None:
        try:
            return evaluate_fast(self.fn, self.table, self.full(theta), self.y.size)
        except (GuardViolation, EvaluationError):
            return None

    def raw(self, theta: np.ndarray) -> float:
        pred = self.predict(theta)
        if pred is None:
            return np.inf
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.mean((self.y - pred) ** 2))

    def __call__(self, theta: np.ndarray) -> float:
        f = self.raw(theta)
        if f < self.best_f:
            self.best_f, self.best_theta = f, np.array(theta, dtype=float)
        return f if np.isfinite(f) else _PENALTY


def fd_gradient(obj: _Objective, theta: np.ndarray, step: float, upper: np.ndarray) -> np.ndarray:
    """Gradient of the train MSE from a forward-difference Jacobian of the predictions.

    The step is relative (``step * max(1, |p|)``) and flips to a backward
    difference when it would cross the upper bound. Differencing predictions
    rather than the loss keeps the gradient exact for parameters that enter
    the model linearly.
    """
    pred = obj.predict(theta)
    g = np.zeros_like(theta)
    if pred is None:
        return g
    resid = pred - obj.y
    for i in range(theta.size):
        h = step * max(1.0, abs(theta[i]))
        if theta[i] + h > upper[i]:
            h = -h
        tp = theta.copy()
        tp[i] += h
        pi = obj.predict(tp)
        if pi is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                gi = 2.0 * float(np.mean(resid * (pi - pred))) / h
            g[i] = gi if np.isfinite(gi) else 0.0
    return g


def _train(d):
    return d.table("train"), d.target("train")


def fit_params(expr: Expression, d, cfg: FitConfig = FitConfig(), init: Sequence[float] | None = None) -> FitResult:
    """Minimize train MSE over the parameters that appear in ``expr``.

    Slots absent from ``expr`` keep their initial value exactly.
    """
    missing = free_vars(expr) - set(d.names)
    if missing:
        raise ValueError(f"expression uses variables missing from the dataset: {sorted(missing)}")
    lo, hi = cfg.bound_arrays()
    base = np.asarray(cfg.init if init is None else init, dtype=float).copy()
    used = param_indices(expr)
    table, y = _train(d)
    obj = _Objective(expr, table, y, base, used)
    theta0 = base[used]
    f0 = obj.raw(theta0)
    if not np.isfinite(f0):
        return FitResult(base, np.inf, 0, False, feasible=False)
    if not used:
        return FitResult(base, f0, 0, True, history=(f0,))

    cache = {}

    def fun(theta):
        key = theta.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = obj(theta)
        return cache[key]

    def jac(theta):
        return fd_gradient(obj, theta, cfg.grad_step, hi[used])

    history = [f0]
    res = minimize(
        fun, theta0, jac=jac, method="L-BFGS-B",
        bounds=list(zip(lo[used], hi[used])),
        callback=lambda th: history.append(fun(th)),
        options={"maxiter": cfg.max_iterations, "ftol": cfg.tol, "gtol": 1e-14, "maxls": 40},
    )
    theta = np.clip(res.x, lo[used], hi[used])
    if obj.best_theta is not None and obj.best_f < obj.raw(theta):
        theta = np.clip(obj.best_theta, lo[used], hi[used])
    params = obj.full(theta)
    # independent recomputation through the guarded evaluator
    try:
        mse = float(np.mean((y - evaluate(expr, table, params)) ** 2))
    except (GuardViolation, EvaluationError):
        return FitResult(base, np.inf, int(res.nit), False, feasible=False)
    if mse > f0:
        params, mse = base, f0
    return FitResult(params, mse, int(res.nit), bool(res.success), history=tuple(history))


def fit_with_retries(
    expr: Expression,
    d,
    cs: ConstraintSet,
    cfg: FitConfig = FitConfig(),
    retries: int = 10,
    seed: int | None = 0,
    stats: DataStats | None = None,
    guard: EvalGuard = DEFAULT_GUARD,
    stage: str = "",
    parents: tuple = (),
    rationale: str = "",
):
    """Fit, check constraints, and refit from random starts while invalid.

    Returns the best-MSE valid candidate if any attempt passes, else the
    best-MSE candidate overall (``valid=False``); all-infeasible attempts give
    a candidate flagged ``infeasible``.
    """
    from .pool import Candidate

    stats = stats or DataStats.from_dataset(d)
    rng = np.random.default_rng(seed)
    lo, hi = cfg.bound_arrays()
    used = param_indices(expr)
    best_valid = best_any = None
    restarts = 0
    for attempt in range(retries + 1):
        init = np.asarray(cfg.init, dtype=float).copy()
        if attempt > 0:
            if not used:
                break
            a, b = cfg.restart_range
            init[used] = np.clip(rng.uniform(a, b, size=len(used)), lo[used], hi[used])
            restarts = attempt
        fit = fit_params(expr, d, cfg, init=init)
        if not fit.feasible:
            continue
        report = check(expr, fit.params, cs, stats, guard)
        item = (fit, report)
        if best_any is None or fit.mse < best_any[0].mse:
            best_any = item
        if report.valid:
            best_valid = item
            break
    chosen = best_valid or best_any
    if chosen is None:
        return Candidate.infeasible_of(expr, np.asarray(cfg.init, dtype=float), stage, parents, rationale,
                                       restarts)
    fit, report = chosen
    table, y = _train(d)
    resid = y - evaluate(expr, table, fit.params)
    return Candidate(
        expr=expr,
        params=fit.params,
        score_mse=-fit.mse,
        valid=report.valid,
        report=report,
        residual=resid,
        stage=stage,
        parents=tuple(parents),
        rationale=rationale,
        restarts_used=restarts,
    )
