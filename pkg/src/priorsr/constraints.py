"""Executable prior constraints and the per-benchmark catalogs.

A :class:`Check` is data: a kind, a probe specification and a tolerance.
:func:`check` instantiates each probe from :class:`DataStats` (train ranges,
medians, target scale) and returns a :class:`CheckReport`.

Probe specification keys (all optional unless noted):

``vary``
    ``{var: range}`` where range is ``"train"``, ``[lo, hi]``,
    ``{"frac": [a, b]}`` (fraction of the train range) or ``{"scale": k}``
    (train range widened about its centre by ``k``).
``fixed``
    ``{var: value}``; value is a number, ``"median"`` or ``"equilibrium"``.
    Variables neither varied nor fixed sit at their train median.
``points``
    Samples along a single varied axis (default 64); cross products use
    ``points_per_axis`` (default 16).
``grids``
    A list of probe specifications whose points are concatenated.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .expr import (
    EvalGuard,
    EvaluationError,
    Expression,
    GuardViolation,
    UnboundVariableError,
    evaluate,
    free_vars,
)

KINDS = (
    "value_at", "sign_at", "monotone_on", "unimodal_on", "bounded_on", "nonlinearity",
    "equilibrium", "bounded_trajectory", "asymmetry", "dependence",
)
MODES = ("pointwise", "statistical")
STAT_PASS_FRACTION = 0.95
NONFINITE = "non-finite output"


class UnknownSystemError(KeyError):
    pass


@dataclass(frozen=True)
class Check:
    name: str
    kind: str
    probe: Mapping = field(default_factory=dict)
    tolerance: float = 1e-6
    relative: bool = True
    mode: str = "pointwise"
    description: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown check kind {self.kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class ConstraintSet:
    system: str
    variables: tuple[str, ...]
    checks: tuple[Check, ...]

    def __post_init__(self):
        if not self.checks:
            raise ValueError("a constraint set needs at least one check")
        names = [c.name for c in self.checks]
        if len(set(names)) != len(names):
            raise ValueError("check names must be unique")

    def __len__(self) -> int:
        return len(self.checks)

    def names(self) -> list[str]:
        return [c.name for c in self.checks]

    def with_mode(self, mode: str) -> "ConstraintSet":
        return replace(self, checks=tuple(replace(c, mode=mode) for c in self.checks))

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "variables": list(self.variables),
            "checks": [_plain(asdict(c)) for c in self.checks],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConstraintSet":
        checks = tuple(Check(**c) for c in data["checks"])
        return cls(data["system"], tuple(data["variables"]), checks)

    def render(self) -> str:
        """Human-readable rule list for prompts."""
        lines = [f"{i + 1}. {c.description or c.name}" for i, c in enumerate(self.checks)]
        return "\n".join(lines)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""


@dataclass(frozen=True)
class CheckReport:
    valid: bool
    per_check: tuple[CheckResult, ...]
    failure_reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "failure_reason": self.failure_reason,
            "per_check": [asdict(r) for r in self.per_check],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CheckReport":
        return cls(bool(data["valid"]), tuple(CheckResult(**r) for r in data["per_check"]),
                   data.get("failure_reason"))

    def format(self) -> str:
        lines = [f"valid: {int(self.valid)}"]
        for r in self.per_check:
            mark = "PASS" if r.passed else "FAIL"
            extra = f"  ({r.detail})" if r.detail else ""
            lines.append(f"  [{mark}] {r.name}: measured={r.measured:.6g} threshold={r.threshold:.6g}{extra}")
        if self.failure_reason:
            lines.append(f"failure_reason: {self.failure_reason}")
        return "\n".join(lines)


@dataclass(frozen=True)
class DataStats:
    ranges: Mapping[str, tuple[float, float]]
    medians: Mapping[str, float]
    target_scale: float
    noise_sigma: float = 0.0
    equilibrium: float | None = None
    n: int = 0

    @classmethod
    def from_dataset(cls, d, split: str = "train", noise_sigma: float | None = None) -> "DataStats":
        tb = d.table(split)
        y = d.target(split)
        if noise_sigma is None:
            noise_sigma = float(d.provenance.get("noise", {}).get("sigma", 0.0))
        scale = float(np.max(np.abs(y))) if y.size else 1.0
        return cls(
            ranges={k: (float(v.min()), float(v.max())) for k, v in tb.items()},
            medians={k: float(np.median(v)) for k, v in tb.items()},
            target_scale=scale if scale > 0 else 1.0,
            noise_sigma=noise_sigma,
            equilibrium=d.provenance.get("A_eq"),
            n=int(y.size),
        )

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: Mapping) -> "DataStats":
        data = dict(data)
        data["ranges"] = {k: tuple(v) for k, v in data["ranges"].items()}
        return cls(**data)


def _plain(obj):
    if isinstance(obj, Mapping):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# probe grids


def _axis_range(spec, name: str, stats: DataStats) -> tuple[float, float]:
    lo, hi = stats.ranges[name]
    if spec == "train":
        return lo, hi
    if isinstance(spec, Mapping):
        if "frac" in spec:
            a, b = spec["frac"]
            return lo + a * (hi - lo), lo + b * (hi - lo)
        if "scale" in spec:
            c, h = (lo + hi) / 2, (hi - lo) / 2 * spec["scale"]
            return c - h, c + h
        raise ValueError(f"bad range spec for {name}: {spec!r}")
    a, b = spec
    return float(a), float(b)


def _fixed_value(spec, name: str, stats: DataStats) -> float:
    if spec == "median":
        return stats.medians[name]
    if spec == "equilibrium":
        if stats.equilibrium is None:
            raise ValueError("probe needs an equilibrium but data stats carry none")
        return float(stats.equilibrium)
    return float(spec)


def _grid(probe: Mapping, stats: DataStats, variables: Sequence[str], along: str | None = None):
    """Cross-product grid; returns (table, shape, axis order)."""
    vary = dict(probe.get("vary", {}))
    if along is not None and along not in vary:
        vary[along] = "train"
    fixed = probe.get("fixed", {})
    points = int(probe.get("points", 64))
    per_axis = int(probe.get("points_per_axis", 16))
    axes, order = [], []
    for name in variables:
        if name in vary:
            lo, hi = _axis_range(vary[name], name, stats)
            n = points if (len(vary) == 1 or name == along) else per_axis
            axes.append(np.linspace(lo, hi, n))
            order.append(name)
    mesh = np.meshgrid(*axes, indexing="ij") if axes else []
    shape = mesh[0].shape if axes else (1,)
    size = int(np.prod(shape))
    table = {}
    for name in variables:
        if name in order:
            table[name] = mesh[order.index(name)].ravel()
        else:
            table[name] = np.full(size, _fixed_value(fixed.get(name, "median"), name, stats))
    return table, shape, order


def _points(probe: Mapping, stats: DataStats, variables: Sequence[str]) -> dict[str, np.ndarray]:
    if "grids" in probe:
        parts = [_grid(g, stats, variables)[0] for g in probe["grids"]]
        return {k: np.concatenate([p[k] for p in parts]) for k in variables}
    return _grid(probe, stats, variables)[0]


# ---------------------------------------------------------------------------
# check kinds

Fn = Callable[[Mapping[str, np.ndarray]], np.ndarray]


@dataclass
class _Ctx:
    f: Fn
    expr: Expression
    params: np.ndarray
    stats: DataStats
    variables: tuple[str, ...]
    guard: EvalGuard


def _tol(c: Check, stats: DataStats) -> float:
    return c.tolerance * (stats.target_scale if c.relative else 1.0)


def _fraction_rule(ok: np.ndarray, c: Check) -> tuple[bool, float, float]:
    frac = float(np.mean(ok)) if ok.size else 1.0
    need = 1.0 if c.mode == "pointwise" else STAT_PASS_FRACTION
    return frac >= need, frac, need


def _k_value_at(c: Check, x: _Ctx) -> CheckResult:
    pts = _points(c.probe, x.stats, x.variables)
    r = x.f(pts) - float(c.probe.get("target", 0.0))
    tol = _tol(c, x.stats)
    if c.mode == "pointwise":
        worst = float(np.max(np.abs(r)))
        return CheckResult(c.name, worst <= tol, worst, tol)
    n = r.size
    sd = max(float(np.std(r, ddof=1)) if n > 1 else 0.0, x.stats.noise_sigma)
    thr = tol + 2.0 * sd / np.sqrt(n)
    m = abs(float(np.mean(r)))
    return CheckResult(c.name, m <= thr, m, thr, "mean residual")


def _centre(spec, name: str, stats: DataStats) -> float:
    if spec is None:
        return 0.0
    return _fixed_value(spec, name, stats)


def _k_sign_at(c: Check, x: _Ctx) -> CheckResult:
    """Sign requirement on f or a derived quantity.

    ``transform`` may be ``{"baseline": var}`` (f minus f with var at the
    relation centre) or ``{"odd": var}`` (odd part of f in var about the
    centre). ``relation`` ``{"var", "center", "sense"}`` multiplies the
    quantity by ``sign(var - center)`` (``same``) or its negative
    (``opposite``) so that e.g. a restoring force becomes a positivity test.
    """
    pts = _points(c.probe, x.stats, x.variables)
    q = x.f(pts)
    rel = c.probe.get("relation")
    tr = c.probe.get("transform", {})
    if tr:
        (how, var), = tr.items()
        ctr = _centre((rel or {}).get("center"), var, x.stats) if rel and rel["var"] == var else 0.0
        other = dict(pts)
        if how == "baseline":
            other[var] = np.full_like(pts[var], ctr)
            q = q - x.f(other)
        elif how == "odd":
            other[var] = 2 * ctr - pts[var]
            q = (q - x.f(other)) / 2
        else:
            raise ValueError(f"unknown transform {how!r}")
    keep = np.ones(q.size, dtype=bool)
    if rel:
        var = rel["var"]
        ctr = _centre(rel.get("center"), var, x.stats)
        lo, hi = x.stats.ranges[var]
        ball = float(rel.get("exclude", 0.02)) * (hi - lo)
        off = pts[var] - ctr
        keep = np.abs(off) > ball
        s = np.sign(off)
        q = q * (-s if rel.get("sense", "opposite") == "opposite" else s)
    q = q[keep]
    tol = _tol(c, x.stats)
    sign = c.probe.get("sign", "nonneg")
    if sign == "pos":
        ok, measured, thr = q > 0, float(np.min(q, initial=np.inf)), 0.0
    elif sign == "neg":
        ok, measured, thr = q < 0, float(np.max(q, initial=-np.inf)), 0.0
    elif sign == "nonneg":
        ok, measured, thr = q >= -tol, float(np.min(q, initial=np.inf)), -tol
    elif sign == "nonpos":
        ok, measured, thr = q <= tol, float(np.max(q, initial=-np.inf)), tol
    else:
        raise ValueError(f"unknown sign {sign!r}")
    passed, frac, need = _fraction_rule(ok, c)
    if c.mode == "statistical":
        return CheckResult(c.name, passed, frac, need, "pass fraction")
    return CheckResult(c.name, passed, measured, thr)


def _slices(c: Check, x: _Ctx, along: str):
    table, shape, order = _grid(c.probe, x.stats, x.variables, along=along)
    F = x.f(table).reshape(shape)
    F = np.moveaxis(F, order.index(along), -1).reshape(-1, shape[order.index(along)])
    return F


def _k_monotone_on(c: Check, x: _Ctx) -> CheckResult:
    along = c.probe["along"]
    sense = 1.0 if c.probe.get("direction", "increasing") == "increasing" else -1.0
    F = _slices(c, x, along)
    tol = _tol(c, x.stats)
    if c.probe.get("aggregate") == "mean_endpoints":
        gap = sense * float(np.mean(F[:, -1]) - np.mean(F[:, 0]))
        return CheckResult(c.name, gap > tol, gap, tol, "mean endpoint change")
    diffs = sense * np.diff(F, axis=1)
    ok = diffs >= -tol
    passed, frac, need = _fraction_rule(ok.ravel(), c)
    if c.mode == "statistical":
        return CheckResult(c.name, passed, frac, need, "pass fraction")
    return CheckResult(c.name, passed, float(diffs.min()), -tol)


def _sign_changes(row: np.ndarray, eps: float) -> tuple[int, bool]:
    d = np.diff(row)
    s = np.sign(d[np.abs(d) > eps])
    if s.size == 0:
        return 0, False
    changes = int(np.sum(s[1:] != s[:-1]))
    return changes, bool(s[0] > 0 and s[-1] < 0)


def _k_unimodal_on(c: Check, x: _Ctx) -> CheckResult:
    along = c.probe["along"]
    along = [along] if isinstance(along, str) else list(along)
    eps = _tol(c, x.stats)
    results, worst = [], 0
    for var in along:
        for row in _slices(c, x, var):
            n, peak = _sign_changes(row, eps)
            results.append(n == 1 and peak)
            worst = max(worst, abs(n - 1))
    passed, frac, need = _fraction_rule(np.array(results), c)
    if c.mode == "statistical":
        return CheckResult(c.name, passed, frac, need, "unimodal slice fraction")
    return CheckResult(c.name, passed, float(worst), 0.0, "max |sign changes - 1|")


def _k_bounded_on(c: Check, x: _Ctx) -> CheckResult:
    pts = _points(c.probe, x.stats, x.variables)
    val = x.f(pts)
    bound = float(c.probe.get("bound", 10.0)) * (x.stats.target_scale if c.relative else 1.0)
    m = float(np.max(np.abs(val)))
    return CheckResult(c.name, m <= bound, m, bound)


def _k_nonlinearity(c: Check, x: _Ctx) -> CheckResult:
    probe = c.probe if ("vary" in c.probe or "grids" in c.probe) else {
        **c.probe, "vary": {v: "train" for v in x.variables}}
    pts = _points(probe, x.stats, x.variables)
    y = x.f(pts)
    cols = [pts[v] for v in x.variables if np.ptp(pts[v]) > 0]
    A = np.column_stack(cols + [np.ones(y.size)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    spread = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
    rel = float(np.sqrt(np.mean(resid**2))) / spread if spread > 0 else 0.0
    return CheckResult(c.name, rel > c.tolerance, rel, c.tolerance, "relative affine residual")


def _k_equilibrium(c: Check, x: _Ctx) -> CheckResult:
    var = c.probe.get("var", x.variables[0])
    fixed = {**c.probe.get("fixed", {}), var: "equilibrium"}
    pts = _points({"fixed": fixed}, x.stats, x.variables)
    val = float(np.max(np.abs(x.f(pts))))
    tol = _tol(c, x.stats)
    return CheckResult(c.name, val <= tol, val, tol)


def _k_bounded_trajectory(c: Check, x: _Ctx) -> CheckResult:
    from .datagen import IntegrationError, integrate_ode

    p = c.probe
    names = tuple(p.get("names", ("t", "x", "v")))
    bound = float(p.get("bound", 10.0))
    try:
        tr = integrate_ode(x.expr, p.get("x0", 0.5), p.get("v0", 0.5), tuple(p.get("t_span", (0.0, 50.0))),
                           p.get("dt", 0.05), x.params, names=names, bound=bound)
    except IntegrationError as exc:
        return CheckResult(c.name, False, float("inf"), bound, f"trajectory diverged at step {exc.step}")
    m = float(np.max(np.abs(tr.x)))
    return CheckResult(c.name, m <= bound, m, bound, "max |x| along trajectory")


def _k_asymmetry(c: Check, x: _Ctx) -> CheckResult:
    """Compare responses at centre +/- d along ``var`` after removing f(centre).

    ``center`` is a number or ``"argmax"`` (peak of f along var within the
    train range). ``direction`` ``"high_sharper"`` requires the drop above the
    centre to exceed the drop below it for some d; ``"any"`` requires the
    magnitudes to differ. ``restoring`` additionally requires
    g(+d) < 0 < g(-d).
    """
    p = c.probe
    var = p["var"]
    lo, hi = x.stats.ranges[var]
    base = _points({"fixed": p.get("fixed", {})}, x.stats, x.variables)

    def along(vals):
        tb = {k: np.repeat(v, len(vals)) for k, v in base.items()}
        tb[var] = np.asarray(vals, dtype=float)
        return x.f(tb)

    centre = p.get("center", 0.0)
    if centre == "argmax":
        res = minimize_scalar(lambda z: -float(along([z])[0]), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-6})
        centre = float(res.x)
    centre = float(centre)
    dmax = min(centre - lo, hi - centre)
    if dmax <= 0:
        return CheckResult(c.name, False, 0.0, 0.0, "centre on the range boundary")
    d = np.linspace(0, dmax, int(p.get("points", 64)) + 1)[1:]
    f0 = along([centre])[0]
    g_hi = along(centre + d) - f0
    g_lo = along(centre - d) - f0
    tol = _tol(c, x.stats)
    if p.get("restoring", False) and not (np.all(g_hi < 0) and np.all(g_lo > 0)):
        return CheckResult(c.name, False, 0.0, tol, "not restoring about the centre")
    if p.get("direction", "any") == "high_sharper":
        gap = float(np.max(np.abs(g_hi) - np.abs(g_lo)))
    else:
        gap = float(np.max(np.abs(np.abs(g_hi) - np.abs(g_lo))))
    return CheckResult(c.name, gap > tol, gap, tol, f"centre {centre:.6g}")


def _k_dependence(c: Check, x: _Ctx) -> CheckResult:
    """Required variables must change f on the probe grid, forbidden ones must not."""
    p = c.probe
    required, forbidden = list(p.get("required", ())), list(p.get("forbidden", ()))
    vary = {v: "train" for v in x.variables}
    vary.update(p.get("vary", {}))
    table, shape, order = _grid({"vary": vary, "points_per_axis": p.get("points_per_axis", 8)},
                                x.stats, x.variables)
    F = x.f(table).reshape(shape)
    tol = _tol(c, x.stats)
    effects = {v: float(np.max(np.ptp(F, axis=order.index(v)))) for v in order}
    missing = [v for v in required if effects.get(v, 0.0) <= tol]
    present = [v for v in forbidden if effects.get(v, 0.0) > tol]
    if missing or present:
        parts = ([f"no effect of {', '.join(missing)}"] if missing else []) + (
            [f"depends on {', '.join(present)}"] if present else [])
        worst = min([effects.get(v, 0.0) for v in missing], default=0.0)
        return CheckResult(c.name, False, worst, tol, "; ".join(parts))
    weakest = min([effects.get(v, 0.0) for v in required], default=0.0)
    return CheckResult(c.name, True, weakest, tol, "weakest required effect")


_KIND_FN = {
    "value_at": _k_value_at,
    "sign_at": _k_sign_at,
    "monotone_on": _k_monotone_on,
    "unimodal_on": _k_unimodal_on,
    "bounded_on": _k_bounded_on,
    "nonlinearity": _k_nonlinearity,
    "equilibrium": _k_equilibrium,
    "bounded_trajectory": _k_bounded_trajectory,
    "asymmetry": _k_asymmetry,
    "dependence": _k_dependence,
}


def check(
    expr: Expression,
    params: Sequence[float],
    cs: ConstraintSet,
    data_stats: DataStats,
    guard: EvalGuard = EvalGuard(),
) -> CheckReport:
    """Run every check in ``cs``; ``valid`` is their conjunction."""
    p = np.zeros(10)
    p[: len(params)] = np.asarray(params, dtype=np.float64)[:10]
    unknown = free_vars(expr) - set(cs.variables)

    def f(table):
        return evaluate(expr, table, p, guard)

    ctx = _Ctx(f, expr, p, data_stats, tuple(cs.variables), guard)
    results = []
    for c in cs.checks:
        if unknown:
            results.append(CheckResult(c.name, False, float("nan"), c.tolerance,
                                       f"unknown variables {sorted(unknown)}"))
            continue
        try:
            results.append(_KIND_FN[c.kind](c, ctx))
        except (GuardViolation, UnboundVariableError, EvaluationError):
            results.append(CheckResult(c.name, False, float("nan"), c.tolerance, NONFINITE))
    first = next((r for r in results if not r.passed), None)
    reason = None
    if first is not None and first.detail == NONFINITE:
        reason = NONFINITE
    elif first is not None:
        reason = f"{first.name} failed (measured {first.measured:.6g}, threshold {first.threshold:.6g})"
        if first.detail:
            reason += f"; {first.detail}"
    return CheckReport(first is None, tuple(results), reason)


# ---------------------------------------------------------------------------
# catalogs


def _ecoli() -> ConstraintSet:
    lethal_T = {"grids": [
        {"vary": {"B": "train", "S": "train", "T": [10.0, 25.0], "pH": "train"}},
        {"vary": {"B": "train", "S": "train", "T": [60.0, 75.0], "pH": "train"}},
    ]}
    lethal_pH = {"grids": [
        {"vary": {"B": "train", "S": "train", "T": "train", "pH": [1.0, 3.0]}},
        {"vary": {"B": "train", "S": "train", "T": "train", "pH": [11.0, 13.0]}},
    ]}
    checks = (
        Check("multivariate", "dependence", {"required": ["B", "S", "T", "pH"]}, 1e-3,
              description="The growth rate must depend on B, S, T and pH."),
        Check("causality", "value_at", {"vary": {"S": "train", "T": "train", "pH": "train"},
                                         "fixed": {"B": 0.0}, "target": 0.0}, 1e-6,
              description="No growth without a population: dB/dt = 0 whenever B = 0."),
        Check("viability", "sign_at", {"grids": lethal_T["grids"] + lethal_pH["grids"], "sign": "nonpos"}, 1e-2,
              description="At lethal temperature (T <= 25 or T >= 60) or pH (<= 3 or >= 11) the rate is not positive."),
        Check("unimodal", "unimodal_on", {"along": ["T", "pH"]}, 1e-9,
              description="The rate rises to a single optimum and then falls, both in T and in pH."),
        Check("temperature_asymmetry", "asymmetry",
              {"var": "T", "center": "argmax", "direction": "high_sharper"}, 1e-2,
              description="Above the optimal temperature the rate falls off faster than below it."),
    )
    return ConstraintSet("ecoli", ("B", "S", "T", "pH"), checks)


def _stress() -> ConstraintSet:
    checks = (
        Check("thermo_mechanical", "dependence", {"required": ["eps", "T"]}, 1e-3,
              description="Stress must depend on both strain and temperature."),
        Check("small_strain", "value_at", {"vary": {"T": "train"}, "fixed": {"eps": 0.0}, "target": 0.0}, 5e-2,
              description="Stress is close to zero when the strain is close to zero."),
        Check("hardening", "monotone_on",
              {"along": "eps", "vary": {"eps": {"frac": [0.0, 0.5]}, "T": "train"}, "direction": "increasing"},
              1e-6, description="Stress increases with strain over the elastic and early plastic range."),
        Check("thermal_softening", "monotone_on",
              {"along": "T", "vary": {"eps": {"frac": [0.0, 0.5]}, "T": "train"}, "direction": "decreasing",
               "aggregate": "mean_endpoints"}, 1e-6,
              description="On average the material is weaker at the highest temperature than at the lowest."),
        Check("bounded", "bounded_on", {"vary": {"eps": {"scale": 1.5}, "T": {"scale": 1.2}}, "bound": 10.0},
              1e-6, description="Predictions stay finite and within ten times the observed stress scale."),
    )
    return ConstraintSet("stress_csv", ("eps", "T"), checks)


def _crk() -> ConstraintSet:
    checks = (
        Check("dynamics_form", "dependence", {"required": ["A"]}, 1e-3,
              description="The rate dA/dt must be a function of the concentration A."),
        Check("equilibrium", "equilibrium", {"var": "A"}, 1e-2,
              description="The rate vanishes at the known equilibrium concentration A_eq."),
        Check("stability", "sign_at",
              {"vary": {"A": {"frac": [0.02, 1.0]}}, "points": 256, "sign": "pos",
               "relation": {"var": "A", "center": "equilibrium", "sense": "opposite", "exclude": 0.02}}, 1e-6,
              description="Below A_eq the concentration grows and above it the concentration decays."),
        Check("nonnegative_at_zero", "sign_at", {"fixed": {"A": 0.0}, "sign": "nonneg"}, 1e-6, relative=False,
              description="At A = 0 the rate is not negative."),
        Check("nonlinearity", "nonlinearity", {}, 1e-2,
              description="The rate law must be nonlinear in A."),
    )
    return ConstraintSet("crk", ("A",), checks)


def _osc(which: str) -> ConstraintSet:
    traj = {"x0": 0.5, "v0": 0.5, "t_span": [0.0, 50.0], "dt": 0.05, "bound": 10.0}
    restoring_probe = {"vary": {"x": "train"}, "fixed": {"v": 0.0}, "points": 64, "sign": "pos",
                       "transform": {"baseline": "x"},
                       "relation": {"var": "x", "center": 0.0, "sense": "opposite", "exclude": 0.02}}
    damping = Check("damping", "sign_at",
                    {"vary": {"v": "train"}, "fixed": {"x": 0.0}, "points": 64, "sign": "pos",
                     "transform": {"odd": "v"},
                     "relation": {"var": "v", "center": 0.0, "sense": "opposite", "exclude": 0.02}}, 1e-6,
                    description="The velocity-odd part of the acceleration opposes the velocity.")
    nonlinear = Check("nonlinearity", "nonlinearity", {}, 1e-2,
                      description="The acceleration must be nonlinear in the state.")
    bounded = Check("bounded_trajectory", "bounded_trajectory", traj, 1e-6,
                    description="Starting from x = 0.5, v = 0.5 the trajectory stays within |x| <= 10 up to t = 50.")
    if which == "osc1":
        checks = (
            Check("autonomous", "dependence", {"required": ["x", "v"], "forbidden": ["t"]}, 1e-6,
                  description="The acceleration depends on x and v only, with no explicit time dependence."),
            Check("restoring", "sign_at", restoring_probe, 1e-6,
                  description="Displacement produces a force back toward x = 0."),
            damping, nonlinear, bounded,
        )
    else:
        checks = (
            Check("non_autonomous", "dependence", {"required": ["t", "x", "v"]}, 1e-3,
                  description="The acceleration carries an explicit time-dependent forcing."),
            Check("asymmetric_restoring", "asymmetry",
                  {"var": "x", "center": 0.0, "fixed": {"v": 0.0}, "restoring": True, "direction": "any"}, 1e-2,
                  description="The force pulls back toward x = 0 with different strength on each side."),
            damping,
            Check("bounded_driving", "bounded_on",
                  {"vary": {"t": [0.0, 200.0]}, "fixed": {"x": 0.0, "v": 0.0}, "points": 2001, "bound": 2.0},
                  1e-6, description="The time-dependent drive at rest stays bounded over long times."),
            nonlinear, bounded,
        )
    return ConstraintSet(which, ("t", "x", "v"), checks)


_CATALOGS = {"ecoli": _ecoli, "stress_csv": _stress, "crk": _crk, "osc1": lambda: _osc("osc1"),
             "osc2": lambda: _osc("osc2")}


def catalog(system: str, mode: str = "pointwise") -> ConstraintSet:
    try:
        cs = _CATALOGS[system]()
    except KeyError:
        raise UnknownSystemError(f"unknown system {system!r}") from None
    return cs if mode == "pointwise" else cs.with_mode(mode)


def save_catalog(cs: ConstraintSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cs.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_catalog(path: str | Path) -> ConstraintSet:
    return ConstraintSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
