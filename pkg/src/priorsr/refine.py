"""Residual-guided refinement: profiling, retrieval, repair and reflection."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .constraints import ConstraintSet, DataStats
from .expr import DEFAULT_GUARD, EvalGuard, EvaluationError, Expression, evaluate, walk
from .generator import GenerationError, PromptContext
from .optimizer import FitConfig, fit_with_retries
from .pool import Candidate, ExperiencePool, _decode, _encode
from .scoring import BudgetState

N_BINS = 8
N_REGIONS = 3
INSIGHT_KINDS = ("success", "failure")


@dataclass(frozen=True)
class Region:
    variable: str
    lo: float
    hi: float
    mean_error: float

    def describe(self) -> str:
        return f"{self.variable} in [{self.lo:.4g}, {self.hi:.4g}]: mean squared error {self.mean_error:.4g}"


@dataclass(frozen=True, eq=False)
class ResidualProfile:
    residual: np.ndarray
    nmse: float
    bias: float
    skewness: float
    kurtosis: float
    bin_edges: dict
    binned_mse: dict
    defect_variable: str
    high_error_regions: tuple

    def render(self) -> str:
        lines = [
            f"NMSE: {self.nmse:.6g}",
            f"bias (mean residual): {self.bias:.6g}",
            f"skewness: {self.skewness:.4g}",
            f"excess kurtosis: {self.kurtosis:.4g}",
            f"variable with the largest error spread: {self.defect_variable}",
            "squared error by variable bin (low to high):",
        ]
        for v, row in self.binned_mse.items():
            cells = ", ".join("-" if not math.isfinite(x) else f"{x:.3g}" for x in row)
            lines.append(f"  {v}: {cells}")
        if self.high_error_regions:
            lines.append("high-error regions:")
            lines.extend(f"  {r.describe()}" for r in self.high_error_regions)
        return "\n".join(lines)


def moments(r: np.ndarray) -> tuple[float, float, float]:
    """Bias, skewness and excess kurtosis with population normalization.

    Zero variance gives skewness and kurtosis 0.
    """
    r = np.asarray(r, dtype=float)
    bias = float(r.mean())
    c = r - bias
    sd = float(np.sqrt(np.mean(c**2)))
    if sd == 0.0:
        return bias, 0.0, 0.0
    # standardize first so tiny residuals do not underflow the power terms
    z = c / sd
    return bias, float(np.mean(z**3)), float(np.mean(z**4)) - 3.0


def _bin_index(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(x.shape, dtype=int)
    return np.clip(np.floor((x - lo) / (hi - lo) * N_BINS).astype(int), 0, N_BINS - 1)


def _best_split(x: np.ndarray, sq: np.ndarray, edges: np.ndarray, name: str) -> Region | None:
    best = None
    for cut in edges[1:-1]:
        left, right = x < cut, x >= cut
        if not left.any() or not right.any():
            continue
        ml, mr = float(sq[left].mean()), float(sq[right].mean())
        gap = abs(ml - mr)
        if best is None or gap > best[0]:
            region = Region(name, float(edges[0]), float(cut), ml) if ml >= mr else Region(
                name, float(cut), float(edges[-1]), mr)
            best = (gap, region)
    return best[1] if best else None


def profile_residual(residual: np.ndarray, y: np.ndarray, table: dict) -> ResidualProfile:
    """Profile a train residual vector (y - prediction) against the input columns."""
    r = np.asarray(residual, dtype=float)
    var = float(np.var(y))
    nmse = float(np.mean(r**2)) / var if var > 0 else float(np.mean(r**2))
    bias, skew, kurt = moments(r)
    sq = r**2
    edges, binned, regions = {}, {}, []
    spread = {}
    for name, col in table.items():
        x = np.asarray(col, dtype=float)
        lo, hi = float(x.min()), float(x.max())
        e = np.linspace(lo, hi, N_BINS + 1)
        idx = _bin_index(x, lo, hi)
        row = np.full(N_BINS, np.nan)
        for b in range(N_BINS):
            m = idx == b
            if m.any():
                row[b] = float(sq[m].mean())
        edges[name] = e
        binned[name] = row
        filled = row[np.isfinite(row)]
        spread[name] = float(filled.max() - filled.min()) if filled.size else 0.0
        reg = _best_split(x, sq, e, name)
        if reg is not None:
            regions.append(reg)
    names = list(table)
    defect = max(names, key=lambda v: (spread[v], -names.index(v)))
    regions.sort(key=lambda g: -g.mean_error)
    return ResidualProfile(r, nmse, bias, skew, kurt, edges, binned, defect, tuple(regions[:N_REGIONS]))


def residual_profile(c: Candidate, d) -> ResidualProfile:
    table, y = d.table("train"), d.target("train")
    resid = c.residual if c.residual is not None else y - evaluate(c.expr, table, c.params)
    return profile_residual(resid, y, table)


# ---------------------------------------------------------------------------
# retrieval


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    """Cosine similarity; None when either vector has zero norm."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def find_similar(
    residual: np.ndarray | ResidualProfile, candidates, top_k: int = 3, exclude: Sequence[int] = ()
) -> list[tuple[Candidate, float]]:
    """Candidates ranked by cosine similarity of their residual vectors.

    Candidates without residuals, with a different length or with a zero
    vector are skipped; ties keep pool order.
    """
    r = residual.residual if isinstance(residual, ResidualProfile) else np.asarray(residual, dtype=float)
    scored = []
    for c in candidates:
        if c.id in exclude or c.residual is None or c.residual.shape != r.shape:
            continue
        s = cosine(r, c.residual)
        if s is not None:
            scored.append((c, s))
    scored.sort(key=lambda cs: -cs[1])
    return scored[:top_k]


def permutation_importance(c: Candidate, d, seed: int = 0) -> dict[str, float]:
    """Increase in train MSE when one input column is shuffled, clamped at 0."""
    table, y = d.table("train"), d.target("train")
    base = float(np.mean((y - evaluate(c.expr, table, c.params)) ** 2))
    rng = np.random.default_rng(seed)
    out = {}
    for name in d.names:
        shuffled = dict(table)
        shuffled[name] = rng.permutation(table[name])
        try:
            mse = float(np.mean((y - evaluate(c.expr, shuffled, c.params)) ** 2))
        except EvaluationError:
            mse = math.inf
        out[name] = max(0.0, mse - base)
    return out


# ---------------------------------------------------------------------------
# insight store records


def fingerprint(residual: np.ndarray | None) -> np.ndarray | None:
    if residual is None:
        return None
    n = float(np.linalg.norm(residual))
    return None if n == 0.0 else np.asarray(residual, dtype=float) / n


@dataclass(frozen=True, eq=False)
class Insight:
    text: str
    kind: str
    island: int
    fingerprint: np.ndarray | None = field(default=None, repr=False)
    created_at: int = 0

    def __post_init__(self):
        if self.kind not in INSIGHT_KINDS:
            raise ValueError(f"insight kind must be one of {INSIGHT_KINDS}")
        if self.fingerprint is not None:
            fp = np.asarray(self.fingerprint, dtype=float)
            if abs(float(np.linalg.norm(fp)) - 1.0) > 1e-9:
                raise ValueError("fingerprint must have unit norm")
            object.__setattr__(self, "fingerprint", fp)

    def to_record(self) -> dict:
        return {"text": self.text, "insight_kind": self.kind, "island": self.island,
                "fingerprint": _encode(self.fingerprint), "created_at": self.created_at}

    @classmethod
    def from_record(cls, r: dict) -> "Insight":
        return cls(r["text"], r["insight_kind"], int(r["island"]), _decode(r.get("fingerprint")),
                   int(r.get("created_at", 0)))


def retrieve_insights(insights, fp: np.ndarray | None, island: int, top_k: int = 3) -> list[Insight]:
    """Own-island insights plus successes from other islands, ranked by fingerprint similarity."""
    eligible = [i for i in insights if i.island == island or i.kind == "success"]
    if fp is None:
        return eligible[-top_k:][::-1]

    def key(item):
        pos, ins = item
        s = cosine(fp, ins.fingerprint) if ins.fingerprint is not None and ins.fingerprint.shape == fp.shape else None
        return (-(s if s is not None else -2.0), -pos)

    ranked = sorted(enumerate(eligible), key=key)
    return [ins for _, ins in ranked[:top_k]]


@dataclass(frozen=True)
class RepairRecord:
    expr: str
    failure_reason: str
    attempt: int
    fix_hint: str = ""

    def __post_init__(self):
        if not 1 <= self.attempt <= 3:
            raise ValueError("repair attempt index must lie in 1..3")

    def render(self) -> str:
        return f"attempt {self.attempt}: {self.expr} -> {self.failure_reason}"

    def to_dict(self) -> dict:
        return {"expr": self.expr, "failure_reason": self.failure_reason, "attempt": self.attempt,
                "fix_hint": self.fix_hint}

    @classmethod
    def from_dict(cls, r: dict) -> "RepairRecord":
        return cls(r["expr"], r["failure_reason"], int(r["attempt"]), r.get("fix_hint", ""))


# ---------------------------------------------------------------------------
# refinement loop


@dataclass(frozen=True)
class RefineConfig:
    num_skeletons: int = 10
    per_call: int = 2
    max_repair_rounds: int = 3
    max_repair_iterations: int = 6
    good_examples: int = 3
    history_shown: int = 3
    top_k_similar: int = 3
    retries: int = 10

    @property
    def max_calls(self) -> int:
        return 2 * math.ceil(self.num_skeletons / self.per_call)


@dataclass
class RefineContext:
    """Run-level pieces the refine and repair prompts need."""

    d: object
    cs: ConstraintSet
    stats: DataStats
    problem: str
    variables: tuple
    target: tuple
    fit_cfg: FitConfig = FitConfig()
    cfg: RefineConfig = RefineConfig()
    seed: int = 0
    guard: EvalGuard = DEFAULT_GUARD
    log: Callable[[str], None] = lambda msg: None
    on_fit: Callable[[Candidate], None] | None = None


@dataclass
class RoundResult:
    registered: list = field(default_factory=list)
    attempts: list = field(default_factory=list)
    requested: int = 0
    calls: int = 0
    repair_iterations: int = 0
    insight: Insight | None = None
    diagnostic: str = ""


def fix_hint(reason: str | None) -> str:
    """Short generic advice keyed on the failing check name."""
    if not reason:
        return ""
    name = reason.split(" ", 1)[0]
    hints = {
        "non-finite": "guard divisions, logarithms and roots against invalid arguments",
        "equilibrium": "make the expression vanish at the known equilibrium",
        "stability": "make the sign flip from positive to negative across the equilibrium",
        "restoring": "add a term that pushes back toward zero displacement",
        "damping": "add a velocity term opposing the motion",
        "bounded_trajectory": "add dissipation so trajectories stay bounded",
        "viability": "drive the output to zero in lethal conditions",
        "nonlinearity": "add a nonlinear term",
    }
    return hints.get(name, f"change the structure so that {name} holds")


def _fit(expr, rc: RefineContext, budget: BudgetState, seed: int, stage: str, parents, rationale) -> Candidate | None:
    if budget.exhausted:
        return None
    c = fit_with_retries(expr, rc.d, rc.cs, rc.fit_cfg, retries=rc.cfg.retries, seed=seed, stats=rc.stats,
                         guard=rc.guard, stage=stage, parents=parents, rationale=rationale)
    budget.advance()
    c = replace(c, created_at=budget.n_curr)
    if rc.on_fit is not None:
        rc.on_fit(c)
    return c


def _ctx(rc: RefineContext, kind: str, **kw) -> PromptContext:
    return PromptContext(kind=kind, problem=rc.problem, variables=rc.variables, target=rc.target,
                         rules=rc.cs.render(), **kw)


def good_examples(pool: ExperiencePool, n: int = 3) -> list[Candidate]:
    valid = sorted((c for c in pool.candidates() if c.valid), key=lambda c: (-c.score_mse, c.id))
    return valid[:n]


def repair(
    failed: Candidate,
    original: Candidate,
    history: list[RepairRecord],
    examples: Sequence[Candidate],
    gen,
    rc: RefineContext,
    budget: BudgetState,
    profile: ResidualProfile | None = None,
    iteration_budget: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[list[Candidate], int]:
    """Ask for structural fixes of ``failed`` for up to three rounds.

    ``examples`` are valid candidates shown as good examples (best first).

    Returns the constraint-passing repairs and the number of repair
    iterations used; ``history`` is extended in place with each failed round.
    """
    if failed.valid:
        return [], 0
    rng = rng or np.random.default_rng(rc.seed)
    limit = rc.cfg.max_repair_rounds if iteration_budget is None else min(rc.cfg.max_repair_rounds,
                                                                           iteration_budget)
    current = failed
    used = 0
    for attempt in range(1, limit + 1):
        if budget.exhausted:
            break
        used += 1
        reason = current.failure_reason or "failed a prior rule"
        ctx = _ctx(
            rc, "repair",
            exemplars=(original.text, current.text),
            samples_per_prompt=1,
            analysis=profile.render() if profile else "",
            references=tuple(c.text for c in list(examples)[: rc.cfg.good_examples]),
            history=tuple(h.render() for h in history[-rc.cfg.history_shown:]),
            failure_reason=reason,
            fix_hint=fix_hint(reason),
            defect_variable=profile.defect_variable if profile else "",
        )
        try:
            out = gen.propose(ctx)
        except GenerationError as exc:
            rc.log(f"repair generation failed: {exc}")
            break
        fixed = []
        for expr, why in out.extracted[:1]:
            c = _fit(expr, rc, budget, int(rng.integers(2**31)), "repair", (failed.id,), why)
            if c is None or c.infeasible:
                continue
            if c.valid:
                fixed.append(c)
            else:
                current = c
        if fixed:
            return fixed, used
        history.append(RepairRecord(current.text, current.failure_reason or reason, attempt, fix_hint(reason)))
    return [], used


def structural_diff(a: Expression, b: Expression) -> str:
    """Deterministic summary of how ``b`` differs from ``a`` in operators and variables."""

    def census(e):
        ops, leaves = Counter(), Counter()
        for n in walk(e):
            op = getattr(n, "op", None)
            if op:
                ops[op] += 1
            elif hasattr(n, "name"):
                leaves[n.name] += 1
        return ops, leaves

    (oa, va), (ob, vb) = census(a), census(b)
    added = sorted((ob - oa).elements())
    removed = sorted((oa - ob).elements())
    parts = []
    if added:
        parts.append("added " + ", ".join(added))
    if removed:
        parts.append("removed " + ", ".join(removed))
    nv = sorted(set(vb) - set(va))
    if nv:
        parts.append("introduced " + ", ".join(nv))
    if not parts:
        parts.append("kept the operator set and rearranged terms")
    return "; ".join(parts)


def reflect(
    original: Candidate,
    attempts: list[tuple[Candidate, bool]],
    gen,
    rc: RefineContext,
    island: int,
    created_at: int,
    profile: ResidualProfile | None = None,
) -> Insight:
    """Summarize a refinement round into a success or failure insight."""
    if not attempts:
        raise ValueError("reflect needs at least one attempt")
    improved = [c for c, ok in attempts if ok]
    fp = fingerprint(original.residual)
    if improved:
        best = max(improved, key=lambda c: c.score_mse)
        summary = (f"{structural_diff(original.expr, best.expr)}: {original.text} -> {best.text} "
                   f"raised the score from {original.score_mse:.4g} to {best.score_mse:.4g}")
        ctx = _ctx(rc, "improvement_analysis", exemplars=(original.text, best.text),
                   scores=(original.score_mse, best.score_mse),
                   analysis=summary if not profile else summary + "\n" + profile.render())
        kind = "success"
    else:
        lines = []
        for c, ok in attempts:
            status = ("Improved" if ok else "NotImproved") + ", " + ("Valid" if c.valid else "Invalid")
            lines.append(f"{c.text} | score {c.score_mse:.4g} | {status}"
                         + (f" | {c.failure_reason}" if c.failure_reason else ""))
        invalid = sum(1 for c, _ in attempts if not c.valid)
        summary = (f"no gain over {original.text} ({original.score_mse:.4g}) from {len(attempts)} attempt(s), "
                   f"{invalid} breaking a rule")
        ctx = _ctx(rc, "reflection", exemplars=(original.text,), scores=(original.score_mse,),
                   results=tuple(lines), analysis=summary)
        kind = "failure"
    try:
        text = gen.explain(ctx)
    except GenerationError as exc:
        rc.log(f"reflection generation failed: {exc}")
        text = summary
    return Insight(text or summary, kind, island, fp, created_at)


def refine_round(
    pool: ExperiencePool,
    island: int,
    gen,
    rc: RefineContext,
    budget: BudgetState,
    rng: np.random.Generator | None = None,
) -> RoundResult:
    """One refinement round on an island's best candidate."""
    rng = rng or np.random.default_rng(rc.seed)
    result = RoundResult()
    best = pool.islands[island].best()
    if best is None:
        raise ValueError(f"island {island} is empty")
    cfg = rc.cfg
    profile = residual_profile(best, rc.d)
    refs = find_similar(profile, pool.candidates(), cfg.top_k_similar, exclude=(best.id,))
    fp = fingerprint(profile.residual)
    insights = retrieve_insights(pool.insights, fp, island, cfg.history_shown)
    hist = [f"original: {h['original']} | improved: {h['improved']} | why: {h['explanation']}"
            for h in pool.refine_history[-cfg.history_shown:]]
    base_ctx = dict(
        exemplars=(best.text,),
        analysis=profile.render(),
        insights="\n".join(f"- {i.text}" for i in insights),
        references=tuple(c.text for c, _ in refs),
        history=tuple(hist),
        defect_variable=profile.defect_variable,
        samples_per_prompt=cfg.per_call,
    )
    skeletons = []
    empty_calls = 0
    while len(skeletons) < cfg.num_skeletons and result.calls < cfg.max_calls:
        need = min(cfg.per_call, cfg.num_skeletons - len(skeletons))
        ctx = _ctx(rc, "refine", **{**base_ctx, "samples_per_prompt": need})
        result.calls += 1
        try:
            out = gen.propose(ctx)
        except GenerationError as exc:
            rc.log(f"refine generation failed: {exc}")
            break
        got = list(out.extracted[:need])
        if not got:
            empty_calls += 1
            if empty_calls >= 2:
                result.diagnostic = "generator returned no skeletons twice; round ended early"
                break
            continue
        skeletons.extend(got)
    result.requested = len(skeletons)

    history: list[RepairRecord] = []
    repair_left = cfg.max_repair_iterations
    for expr, why in skeletons:
        c = _fit(expr, rc, budget, int(rng.integers(2**31)), "refine", (best.id,), why)
        if c is None:
            result.diagnostic = "sample budget exhausted during refinement"
            break
        if c.infeasible:
            continue
        if not c.valid and repair_left > 0:
            result.attempts.append((c, False))
            fixed, used = repair(c, best, history, good_examples(pool, cfg.good_examples), gen, rc, budget,
                                 profile, repair_left, rng)
            repair_left -= used
            result.repair_iterations += used
            c = fixed[0] if fixed else c
            if not fixed:
                continue
        result.attempts.append((c, c.valid and c.score_mse > best.score_mse))
        if c.valid:
            result.registered.append(pool.register(c, island))
    pool.repair_records.extend(h.to_dict() for h in history)

    if result.attempts:
        ins = reflect(best, result.attempts, gen, rc, island, budget.n_curr, profile)
        with pool._lock:
            pool.insights.append(ins)
        result.insight = ins
        if ins.kind == "success":
            top = max((c for c, ok in result.attempts if ok), key=lambda c: c.score_mse)
            pool.refine_history.append({"original": best.text, "improved": top.text, "explanation": ins.text})
    return result
