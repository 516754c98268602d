"""Benchmark datasets: ODE trajectories, analytic grids, noise, subsampling, CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .expr import Expression, compile_expr, evaluate, free_vars, parse

SPLITS = ("train", "id_val", "ood_val")
SYSTEMS = ("ecoli", "crk", "osc1", "osc2", "stress_csv")


class IntegrationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class VariableInfo:
    name: str
    description: str = ""
    units: str = ""


@dataclass(frozen=True, eq=False)
class Dataset:
    system: str
    variables: tuple[VariableInfo, ...]
    target_name: str
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, ndmin=2)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        split = np.array(self.split, dtype="<U7").reshape(-1)
        if X.shape != (y.size, len(self.variables)):
            raise ValueError(f"X has shape {X.shape}, expected ({y.size}, {len(self.variables)})")
        if split.size != y.size:
            raise ValueError("split tags must match row count")
        bad = set(np.unique(split)) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset entries must be finite")
        for a in (X, y, split):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def rows(self) -> np.ndarray:
        return np.column_stack([self.X, self.y])

    def __len__(self) -> int:
        return self.y.size

    def mask(self, split: str | Sequence[str] | None = None) -> np.ndarray:
        if split is None:
            return np.ones(self.y.size, dtype=bool)
        if isinstance(split, str):
            split = (split,)
        return np.isin(self.split, list(split))

    def table(self, split: str | Sequence[str] | None = None) -> dict[str, np.ndarray]:
        m = self.mask(split)
        return {name: self.X[m, i] for i, name in enumerate(self.names)}

    def target(self, split: str | Sequence[str] | None = None) -> np.ndarray:
        return self.y[self.mask(split)]

    def select(self, rows: np.ndarray) -> "Dataset":
        return replace(self, X=self.X[rows], y=self.y[rows], split=self.split[rows])

    def equals(self, other: "Dataset") -> bool:
        return (
            self.names == other.names
            and self.target_name == other.target_name
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.split, other.split)
        )


@dataclass(frozen=True)
class SystemSpec:
    id: str
    variables: tuple[VariableInfo, ...]
    target: str
    ground_truth: Expression | None
    config: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.id not in SYSTEMS:
            raise ValueError(f"unknown system {self.id!r}")
        if self.ground_truth is not None:
            extra = free_vars(self.ground_truth) - {v.name for v in self.variables}
            if extra:
                raise ValueError(f"ground truth uses unknown variables {sorted(extra)}")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True, eq=False)
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray


# ---------------------------------------------------------------------------
# ground truths

OSC1_TRUTH = "0.8*sin(x) - 0.5*v^3 - 0.2*x^3 - 0.5*x*v - x*cos(x)"
OSC2_TRUTH = "0.3*sin(t) - 0.5*v^3 - x*v - 5*x*exp(0.5*x)"
CRK_TRUTH = "-0.1899*A^2 + 0.4598*A^2/(0.7498*A^4 + 1)"

# synthetic E. coli constants: mu_max, K_s, k, x0, c, x_decay, pH_opt, pH_min, pH_max
ECOLI_DEFAULTS = {
    "mu_max": 0.8, "K_s": 0.5, "k": 0.5, "x0": 30.0, "c": 1e-3,
    "x_decay": 37.0, "pH_opt": 7.0, "pH_min": 4.0, "pH_max": 10.0,
}


def ecoli_truth(mu_max=0.8, K_s=0.5, k=0.5, x0=30.0, c=1e-3, x_decay=37.0,
                pH_opt=7.0, pH_min=4.0, pH_max=10.0) -> str:
    width = pH_max - pH_min
    return (
        f"{mu_max!r}*B*S/({K_s!r} + S)*tanh({k!r}*(T - {x0!r}))"
        f"/(1 + {c!r}*(T - {x_decay!r})^4)"
        f"*exp(-abs(pH - {pH_opt!r}))"
        f"*sin((pH - {pH_min!r})*{math.pi!r}/{width!r})^2"
    )


def _vars(*items) -> tuple[VariableInfo, ...]:
    return tuple(VariableInfo(*it) for it in items)


def system_spec(system: str, **overrides) -> SystemSpec:
    """Default :class:`SystemSpec` for a benchmark; ``overrides`` update its config."""
    osc_vars = _vars(("t", "time", "s"), ("x", "position", "m"), ("v", "velocity", "m/s"))
    osc_cfg = {"t_span": (0.0, 50.0), "dt": 0.02, "x0": 0.5, "v0": 0.5, "ood_t": 20.0, "stride": 5}
    if system == "osc1":
        cfg = {**osc_cfg, **overrides}
        return SystemSpec("osc1", osc_vars, "a", parse(OSC1_TRUTH), cfg)
    if system == "osc2":
        cfg = {**osc_cfg, **overrides}
        return SystemSpec("osc2", osc_vars, "a", parse(OSC2_TRUTH), cfg)
    if system == "crk":
        cfg = {
            "A0": (0.25, 2.0), "t_span": (0.0, 20.0), "dt": 0.05, "traj_stride": 4,
            "grid": (0.0, 2.0, 201), "ood_grid": (2.02, 3.5, 75), "stride": 5, **overrides,
        }
        return SystemSpec("crk", _vars(("A", "concentration", "mol/L")), "dA_dt", parse(CRK_TRUTH), cfg)
    if system == "ecoli":
        consts = {k: overrides.pop(k) if k in overrides else v for k, v in ECOLI_DEFAULTS.items()}
        cfg = {
            "constants": consts,
            "train_box": {"B": (0.0, 1.0), "S": (0.0, 4.0), "T": (30.0, 45.0), "pH": (5.0, 9.0)},
            "grid": {"B": (0.0, 1.5, 7), "S": (0.0, 6.0, 9), "T": (25.0, 50.0, 11), "pH": (4.0, 10.0, 13)},
            "stride": 5, **overrides,
        }
        variables = _vars(("B", "population density", "g/L"), ("S", "substrate concentration", "g/L"),
                          ("T", "temperature", "degC"), ("pH", "acidity", ""))
        return SystemSpec("ecoli", variables, "dB_dt", parse(ecoli_truth(**consts)), cfg)
    if system == "stress_csv":
        cfg = {"path": None, "ood_T": 200.0, "stride": 5, **overrides}
        variables = _vars(("eps", "strain", ""), ("T", "temperature", "degC"))
        return SystemSpec("stress_csv", variables, "sigma", None, cfg)
    raise ValueError(f"unknown system {system!r}")


# ---------------------------------------------------------------------------
# integration


def integrate_ode(
    rhs: Expression,
    x0: float,
    v0: float | None,
    t_span: tuple[float, float],
    dt: float,
    params: Sequence[float] = (),
    names: Sequence[str] = ("t", "x", "v"),
    bound: float | None = None,
) -> Trajectory:
    """Fixed-step classical RK4.

    With ``v0`` given, integrates x' = v, v' = rhs(t, x, v) and ``a`` records
    rhs at each sample. With ``v0=None`` the system is first order,
    x' = rhs(t, x), and ``v`` and ``a`` both record rhs. ``names`` gives the
    variable names bound for (time, state, velocity). If ``bound`` is set,
    integration stops once |x| exceeds it and the trajectory is truncated.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    t_name, x_name, v_name = (list(names) + ["v"])[:3]
    allowed = {t_name, x_name} | ({v_name} if v0 is not None else set())
    extra = free_vars(rhs) - allowed
    if extra:
        raise ValueError(f"rhs uses unknown variables {sorted(extra)}")
    fn = compile_expr(rhs)
    pv = np.zeros(10)
    pv[: len(params)] = np.asarray(params, dtype=np.float64)[:10]

    def f(tb):
        return fn(tb, pv)
    t_start, t_end = t_span
    n_steps = int(math.floor((t_end - t_start) / dt + 1e-9))
    t = t_start + dt * np.arange(n_steps + 1)
    xs = np.empty(n_steps + 1)
    vs = np.empty(n_steps + 1)
    acc = np.empty(n_steps + 1)

    if v0 is None:
        def deriv(tt, x, _v):
            return float(f({t_name: tt, x_name: x})), 0.0
    else:
        def deriv(tt, x, v):
            return v, float(f({t_name: tt, x_name: x, v_name: v}))

    x = float(x0)
    v = float(v0) if v0 is not None else 0.0
    last = n_steps
    with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
        for i in range(n_steps + 1):
            ti = t[i]
            try:
                k1 = deriv(ti, x, v)
                rec = k1[0] if v0 is None else k1[1]
                if not math.isfinite(rec):
                    raise FloatingPointError("non-finite derivative")
                xs[i], vs[i], acc[i] = x, (rec if v0 is None else v), rec
                if bound is not None and abs(x) > bound:
                    last = i
                    break
                if i == n_steps:
                    break
                h = dt
                k2 = deriv(ti + h / 2, x + h / 2 * k1[0], v + h / 2 * k1[1])
                k3 = deriv(ti + h / 2, x + h / 2 * k2[0], v + h / 2 * k2[1])
                k4 = deriv(ti + h, x + h * k3[0], v + h * k3[1])
                x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
                v = v + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
                if not (math.isfinite(x) and math.isfinite(v)):
                    raise FloatingPointError("non-finite state")
            except (FloatingPointError, ZeroDivisionError, OverflowError) as exc:
                raise IntegrationError(f"rhs evaluation failed ({exc})", i) from None
    k = last + 1
    return Trajectory(t[:k], xs[:k], vs[:k], acc[:k])


# ---------------------------------------------------------------------------
# dataset construction


def _stride_split(in_domain: np.ndarray, stride: int) -> np.ndarray:
    """Tag in-domain rows train / id_val by a deterministic stride; others OOD."""
    split = np.full(in_domain.size, "ood_val", dtype="<U7")
    idx = np.flatnonzero(in_domain)
    tags = np.where(np.arange(idx.size) % stride == stride - 1, "id_val", "train")
    split[idx] = tags
    return split


def _linspace(spec) -> np.ndarray:
    lo, hi, n = spec
    if n < 1 or hi < lo:
        raise ValueError(f"invalid grid spec {spec!r}")
    return np.linspace(lo, hi, int(n))


def crk_equilibrium(spec: SystemSpec | None = None, bracket=(0.5, 3.0)) -> float:
    """Positive root of the CRK rate law, located by Brent's method."""
    spec = spec or system_spec("crk")
    f = compile_expr(spec.ground_truth)
    return float(brentq(lambda a: float(f({"A": a}, ())), *bracket, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def make_dataset(spec: SystemSpec | str) -> Dataset:
    if isinstance(spec, str):
        spec = system_spec(spec)
    cfg = spec.config
    prov = {"system": spec.id, "config": _jsonable(cfg)}
    if spec.id in ("osc1", "osc2"):
        traj = integrate_ode(spec.ground_truth, cfg["x0"], cfg["v0"], tuple(cfg["t_span"]), cfg["dt"])
        X = np.column_stack([traj.t, traj.x, traj.v])
        split = _stride_split(traj.t >= cfg["ood_t"], cfg["stride"])
        return Dataset(spec.id, spec.variables, spec.target, X, traj.a, split, prov)
    if spec.id == "crk":
        pieces = []
        for a0 in cfg["A0"]:
            tr = integrate_ode(spec.ground_truth, a0, None, tuple(cfg["t_span"]), cfg["dt"], names=("t", "A"))
            pieces.append(tr.x[:: cfg["traj_stride"]])
        pieces.append(_linspace(cfg["grid"]))
        inner = np.concatenate(pieces)
        outer = _linspace(cfg["ood_grid"])
        A = np.concatenate([inner, outer])
        y = evaluate(spec.ground_truth, {"A": A})
        split = _stride_split(np.arange(A.size) < inner.size, cfg["stride"])
        prov["A_eq"] = crk_equilibrium(spec)
        return Dataset("crk", spec.variables, spec.target, A[:, None], y, split, prov)
    if spec.id == "ecoli":
        names = [v.name for v in spec.variables]
        axes = [_linspace(cfg["grid"][n]) for n in names]
        mesh = np.meshgrid(*axes, indexing="ij")
        X = np.column_stack([m.ravel() for m in mesh])
        inside = np.ones(len(X), dtype=bool)
        for i, n in enumerate(names):
            lo, hi = cfg["train_box"][n]
            inside &= (X[:, i] >= lo) & (X[:, i] <= hi)
        y = evaluate(spec.ground_truth, {n: X[:, i] for i, n in enumerate(names)})
        return Dataset("ecoli", spec.variables, spec.target, X, y, _stride_split(inside, cfg["stride"]), prov)
    if spec.id == "stress_csv":
        if not cfg.get("path"):
            raise FileNotFoundError("stress_csv requires config['path']")
        return load_stress_csv(cfg["path"], ood_T=cfg["ood_T"], stride=cfg["stride"])
    raise ValueError(f"unknown system {spec.id!r}")


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# perturbations


def add_noise(d: Dataset, spec: NoiseSpec | float, seed: int | None = None) -> Dataset:
    """Gaussian perturbation of the input columns on train rows only."""
    if not isinstance(spec, NoiseSpec):
        spec = NoiseSpec(float(spec), 0 if seed is None else seed)
    if spec.sigma == 0:
        return d
    rng = np.random.default_rng(spec.seed)
    X = d.X.copy()
    m = d.mask("train")
    X[m] += rng.normal(0.0, spec.sigma, size=X[m].shape)
    prov = {**d.provenance, "noise": {"sigma": spec.sigma, "seed": spec.seed}}
    return replace(d, X=X, provenance=prov)


def subsample(d: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Keep a seeded uniform fraction of train rows and every validation row."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return d
    train = np.flatnonzero(d.mask("train"))
    n_keep = max(1, int(round(fraction * train.size)))
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(train, size=n_keep, replace=False))
    rows = np.sort(np.concatenate([kept, np.flatnonzero(~d.mask("train"))]))
    out = d.select(rows)
    return replace(out, provenance={**d.provenance, "subsample": {"fraction": fraction, "seed": seed}})


# ---------------------------------------------------------------------------
# CSV


def save_csv(d: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*d.names, d.target_name, "split"])
        for xrow, yv, tag in zip(d.X, d.y, d.split):
            w.writerow([repr(float(v)) for v in xrow] + [repr(float(yv)), tag])


def load_csv(path: str | Path, schema: Mapping | None = None) -> Dataset:
    """Read a dataset written by :func:`save_csv`.

    ``schema`` may set ``target`` (default: last column before ``split``),
    ``system`` and ``variables`` (a list of names or :class:`VariableInfo`).
    A file without a ``split`` column is tagged all-train.
    """
    schema = dict(schema or {})
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        has_split = header[-1] == "split"
        value_cols = header[:-1] if has_split else header
        target = schema.get("target", value_cols[-1])
        if target not in value_cols:
            raise ValueError(f"{path}: target column {target!r} not found")
        inputs = [c for c in value_cols if c != target]
        values, tags = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values.append([float(v) for v in (row[:-1] if has_split else row)])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            tags.append(row[-1] if has_split else "train")
    arr = np.array(values, dtype=np.float64).reshape(-1, len(value_cols))
    ti = value_cols.index(target)
    X = arr[:, [value_cols.index(c) for c in inputs]]
    var_meta = schema.get("variables")
    if var_meta:
        variables = tuple(v if isinstance(v, VariableInfo) else VariableInfo(v) for v in var_meta)
        if [v.name for v in variables] != inputs:
            raise ValueError(f"{path}: columns {inputs} do not match schema variables")
    else:
        variables = tuple(VariableInfo(c) for c in inputs)
    return Dataset(schema.get("system", "csv"), variables, target, X, arr[:, ti], np.array(tags),
                   {"source": str(path)})


def load_stress_csv(path: str | Path, ood_T: float = 200.0, stride: int = 5) -> Dataset:
    """Tensile-test table with columns ``eps, T, sigma``; rows at ``ood_T`` are OOD."""
    raw = load_csv(path, {"target": "sigma", "system": "stress_csv"})
    if raw.names != ("eps", "T"):
        raise ValueError(f"{path}: expected input columns eps, T; found {list(raw.names)}")
    spec = system_spec("stress_csv")
    split = _stride_split(raw.X[:, 1] != ood_T, stride)
    return Dataset("stress_csv", spec.variables, "sigma", raw.X, raw.y, split,
                   {"system": "stress_csv", "source": str(path), "ood_T": ood_T})
