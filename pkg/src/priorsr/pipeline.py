"""Three-stage search: warm-up, evolution with periodic refinement, evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .constraints import ConstraintSet, DataStats, catalog
from .datagen import Dataset, add_noise, make_dataset, subsample, system_spec
from .expr import EvalGuard, EvaluationError, Expression, parse, serialize
from .generator import AuthError, EndpointConfig, GenerationError, GrammarGenerator, LLMGenerator, PromptContext
from .optimizer import FitConfig
from .pool import Candidate, ExperiencePool
from .refine import (
    RefineConfig,
    RefineContext,
    _fit,
    fingerprint,
    refine_round,
    repair,
    retrieve_insights,
)
from .scoring import BudgetState, PaceParams, TemperatureSchedule, nmse

log = logging.getLogger("priorsr")

# consecutive empty evolution calls tolerated before the loop gives up
MAX_IDLE_STEPS = 50

TRACE_HEADER = ("sample_index", "best_score", "pace_t", "valid_rate")

PROBLEMS = {
    "osc1": "the acceleration of a nonlinear damped oscillator as a function of time, position and velocity",
    "osc2": "the acceleration of a driven nonlinear damped oscillator as a function of time, position and velocity",
    "crk": "the rate of change of a chemical concentration in an autocatalytic reaction",
    "ecoli": "the growth rate of an E. coli population given density, substrate, temperature and pH",
    "stress_csv": "the flow stress of an aluminium alloy as a function of strain and temperature",
}


@dataclass(frozen=True)
class RunConfig:
    """Flat run configuration; field names double as JSON keys."""

    system: str = "crk"
    data_path: str | None = None
    generator: str = "grammar"
    seed: int = 0
    # remote endpoint
    api_model: str = "gpt-4o-mini"
    api_base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    api_temperature: float = 0.8
    # scoring
    beta: float = 0.6
    pace_alpha: float = 1.2
    pace_eta: float = 1.0
    pace_exp_base: float = 60.0
    cluster_sampling_temp_init: float = 0.1
    cluster_sampling_temp_period: int = 30000
    # fitting
    n_lbfgsb_retries: int = 10
    param_upper: float = 1e6
    params_init: float = 1.0
    evaluate_timeout_seconds: float = 30.0
    # pool and budget
    num_islands: int = 10
    max_sample_num: int = 10000
    reset_period: int = 2000
    samples_per_prompt: int = 4
    functions_per_prompt: int = 2
    num_samplers: int = 1
    # warm-up
    warmup_num_skeletons: int = 100
    warmup_skeletons_per_call: int = 5
    min_physics_passed_warmup: int = 10
    max_warmup_repair_iterations: int = 40
    # refinement and repair
    refine_start_ratio: float = 0.01
    refine_interval: int = 100
    refine_num_skeletons: int = 10
    refine_skeletons_per_call: int = 2
    max_refine_repair_iterations: int = 6
    max_repair_rounds: int = 3
    repair_good_examples_num: int = 3
    repair_history_num: int = 3
    # data perturbation
    constraint_mode: str = "pointwise"
    noise_sigma: float = 0.0
    noise_seed: int = 0
    subsample_fraction: float = 1.0
    subsample_seed: int = 0
    # outputs
    output_dir: str = "runs"
    checkpoint_every: int = 100
    keep_checkpoints: bool = False

    def __post_init__(self):
        if self.generator not in ("grammar", "llm"):
            raise ValueError("generator must be 'grammar' or 'llm'")
        for name in ("max_sample_num", "num_islands", "samples_per_prompt", "functions_per_prompt",
                     "refine_interval", "reset_period", "checkpoint_every", "warmup_skeletons_per_call",
                     "refine_skeletons_per_call", "num_samplers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.refine_start_ratio <= 1.0:
            raise ValueError("refine_start_ratio must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)

    # derived settings
    def pace(self) -> PaceParams:
        return PaceParams(self.beta, self.pace_alpha, self.pace_eta, self.pace_exp_base)

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.cluster_sampling_temp_init, self.cluster_sampling_temp_period)

    def fit_config(self) -> FitConfig:
        return FitConfig(bounds=(0.0, self.param_upper), init=(self.params_init,) * 10)

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            num_skeletons=self.refine_num_skeletons,
            per_call=self.refine_skeletons_per_call,
            max_repair_rounds=self.max_repair_rounds,
            max_repair_iterations=self.max_refine_repair_iterations,
            good_examples=self.repair_good_examples_num,
            history_shown=self.repair_history_num,
            retries=self.n_lbfgsb_retries,
        )

    def guard(self) -> EvalGuard:
        return EvalGuard(timeout=self.evaluate_timeout_seconds)


@dataclass
class RunReport:
    best_expr: str | None
    best_params: list
    best_score: float
    best_valid: bool
    nmse_id: float
    nmse_ood: float
    stage_counts: dict
    trace: list = field(repr=False, default_factory=list)
    wall_time: float = 0.0
    n_samples: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        for k in ("best_score", "nmse_id", "nmse_ood"):
            if not math.isfinite(d[k]):
                d[k] = str(d[k])
        return d

    def format(self) -> str:
        lines = [f"best: {self.best_expr}", f"params: {self.best_params}",
                 f"score (-MSE train): {self.best_score:.6g}  valid: {self.best_valid}",
                 f"NMSE id: {self.nmse_id:.6g}  ood: {self.nmse_ood:.6g}",
                 f"samples: {self.n_samples}  stages: {self.stage_counts}", f"wall time: {self.wall_time:.2f} s"]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# data summary and evaluation


def _r2(x: np.ndarray, y: np.ndarray, deg: int) -> float:
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0 or np.ptp(x) == 0.0:
        return 0.0
    coef = np.polyfit(x, y, deg)
    sse = float(np.sum((y - np.polyval(coef, x)) ** 2))
    return 1.0 - sse / sst


def data_summary(d: Dataset) -> dict:
    """Per-variable statistics on the train split."""
    table, y = d.table("train"), d.target("train")
    out = {}
    for name in d.names:
        x = table[name]
        sx, sy = float(np.std(x)), float(np.std(y))
        corr = 0.0 if sx == 0.0 or sy == 0.0 else float(np.corrcoef(x, y)[0, 1])
        out[name] = {
            "min": float(x.min()), "max": float(x.max()), "mean": float(x.mean()), "std": sx,
            "corr": corr, "nonlinearity": max(0.0, _r2(x, y, 2) - _r2(x, y, 1)),
        }
    return out


def analyze_data(d: Dataset) -> str:
    """Deterministic text summary of the train data for the warm-up prompt."""
    table, y = d.table("train"), d.target("train")
    stats = data_summary(d)
    lines = [f"{y.size} training rows; target {d.target_name} ranges over [{y.min():.4g}, {y.max():.4g}], "
             f"mean {y.mean():.4g}, std {np.std(y):.4g}.", "Variables:"]
    for name, s in stats.items():
        lines.append(
            f"- {name}: min {s['min']:.4g}, max {s['max']:.4g}, mean {s['mean']:.4g}, std {s['std']:.4g}; "
            f"Pearson r with {d.target_name} = {s['corr']:.4f}; quadratic R^2 gain = {s['nonlinearity']:.4f}")
    idx = np.linspace(0, y.size - 1, min(5, y.size)).astype(int)
    lines.append("Sample rows (" + ", ".join([*d.names, d.target_name]) + "):")
    for i in idx:
        lines.append("  " + ", ".join(f"{table[n][i]:.4g}" for n in d.names) + f", {y[i]:.4g}")
    return "\n".join(lines)


def evaluate(expr: Expression, params, d: Dataset) -> tuple[float, float]:
    """NMSE on id_val and ood_val; a split that cannot be evaluated gives +inf."""
    from .expr import evaluate as ev

    out = []
    for split in ("id_val", "ood_val"):
        y = d.target(split)
        if y.size == 0:
            out.append(math.nan)
            continue
        try:
            out.append(nmse(ev(expr, d.table(split), params), y))
        except (EvaluationError, ValueError):
            out.append(math.inf)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# the run


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.system == "stress_csv":
        d = make_dataset(system_spec("stress_csv", path=cfg.data_path))
    elif cfg.data_path:
        from .datagen import load_csv

        d = load_csv(cfg.data_path)
    else:
        d = make_dataset(cfg.system)
    if cfg.noise_sigma > 0:
        d = add_noise(d, cfg.noise_sigma, cfg.noise_seed)
    if cfg.subsample_fraction < 1.0:
        d = subsample(d, cfg.subsample_fraction, cfg.subsample_seed)
    return d


def make_generator(cfg: RunConfig, transport=None):
    if cfg.generator == "grammar":
        return GrammarGenerator(cfg.seed)
    ep = EndpointConfig(base_url=cfg.api_base_url, model=cfg.api_model, api_key_env=cfg.api_key_env,
                        temperature=cfg.api_temperature)
    return LLMGenerator(ep, transport=transport)


class Run:
    """Mutable state of one search; everything needed to resume lives in ``pool.state``."""

    def __init__(self, cfg: RunConfig, d: Dataset | None = None, cs: ConstraintSet | None = None,
                 gen=None, pool: ExperiencePool | None = None):
        self.cfg = cfg
        self.d = d if d is not None else load_data(cfg)
        self.cs = cs if cs is not None else catalog(cfg.system, cfg.constraint_mode)
        self.stats = DataStats.from_dataset(self.d)
        self.gen = gen if gen is not None else make_generator(cfg)
        self.pool = pool if pool is not None else ExperiencePool(cfg.num_islands)
        self.budget = BudgetState(0, cfg.max_sample_num)
        self.rng = np.random.default_rng(cfg.seed)
        self.trace: list[tuple] = []
        self.best_valid = -math.inf
        self.n_valid = 0
        self.stage_counts = {"warmup": 0, "evolution": 0, "refine": 0, "repair": 0}
        self.phase = "warmup"
        self.next_refine = self._first_refine()
        self.next_reset = cfg.reset_period
        variables = tuple((v.name, v.description) for v in self.d.variables)
        self.rc = RefineContext(
            d=self.d, cs=self.cs, stats=self.stats, problem=PROBLEMS.get(cfg.system, cfg.system),
            variables=variables, target=(self.d.target_name, ""), fit_cfg=cfg.fit_config(),
            cfg=cfg.refine_config(), seed=cfg.seed, guard=cfg.guard(), log=log.info, on_fit=self._record,
        )

    def _first_refine(self) -> int:
        start = self.cfg.refine_start_ratio * self.cfg.max_sample_num
        k = max(1, math.ceil(start / self.cfg.refine_interval))
        return k * self.cfg.refine_interval

    # -- bookkeeping ---------------------------------------------------
    def _record(self, c: Candidate) -> None:
        self.stage_counts[c.stage if c.stage in self.stage_counts else "evolution"] += 1
        if c.valid:
            self.n_valid += 1
            self.best_valid = max(self.best_valid, c.score_mse)
        n = self.budget.n_curr
        self.trace.append((n, self.best_valid, self.budget.t, self.n_valid / n))

    def fit(self, expr, stage: str, parents=(), why: str = "") -> Candidate | None:
        return _fit(expr, self.rc, self.budget, int(self.rng.integers(2**31)), stage, parents, why)

    def _ctx(self, kind: str, **kw) -> PromptContext:
        return PromptContext(kind=kind, problem=self.rc.problem, variables=self.rc.variables,
                             target=self.rc.target, rules=self.cs.render(), **kw)

    # -- checkpoint state ----------------------------------------------
    def save_state(self) -> None:
        self.pool.state = {
            "config": self.cfg.to_dict(),
            "n_curr": self.budget.n_curr,
            "rng": self.rng.bit_generator.state,
            "generator": self.gen.get_state(),
            "trace": [list(r) for r in self.trace],
            "best_valid": self.best_valid if math.isfinite(self.best_valid) else None,
            "n_valid": self.n_valid,
            "stage_counts": dict(self.stage_counts),
            "phase": self.phase,
            "next_refine": self.next_refine,
            "next_reset": self.next_reset,
        }

    def restore_state(self) -> None:
        s = self.pool.state
        self.budget = BudgetState(int(s["n_curr"]), self.cfg.max_sample_num)
        self.rng.bit_generator.state = s["rng"]
        self.gen.set_state(s["generator"])
        self.trace = [tuple(r) for r in s["trace"]]
        self.best_valid = -math.inf if s["best_valid"] is None else float(s["best_valid"])
        self.n_valid = int(s["n_valid"])
        self.stage_counts = dict(s["stage_counts"])
        self.phase = s["phase"]
        self.next_refine = int(s["next_refine"])
        self.next_reset = int(s["next_reset"])

    def checkpoint(self, path: Path) -> None:
        self.save_state()
        self.pool.save(path)

    # -- stages ----------------------------------------------------------
    def warmup(self) -> list[Candidate]:
        cfg = self.cfg
        ctx = self._ctx("warmup", analysis=analyze_data(self.d), samples_per_prompt=cfg.warmup_skeletons_per_call)
        kept: list[Candidate] = []
        requested = calls = 0
        max_calls = 2 * math.ceil(cfg.warmup_num_skeletons / cfg.warmup_skeletons_per_call)
        while requested < cfg.warmup_num_skeletons and calls < max_calls and not self.budget.exhausted:
            need = min(cfg.warmup_skeletons_per_call, cfg.warmup_num_skeletons - requested)
            calls += 1
            try:
                out = self.gen.propose(replace(ctx, samples_per_prompt=need))
            except AuthError:
                raise
            except GenerationError as exc:
                log.warning("warm-up generation failed: %s", exc)
                break
            if not out.extracted:
                log.info("warm-up call returned nothing: %s", out.diagnostic)
            for expr, why in out.extracted[:need]:
                requested += 1
                c = self.fit(expr, "warmup", (), why)
                if c is None:
                    break
                if not c.infeasible:
                    kept.append(c)
        kept.extend(self._warmup_repair(kept))
        self.pool.assign_warmup(kept)
        return kept

    def _warmup_repair(self, kept: list[Candidate]) -> list[Candidate]:
        cfg = self.cfg
        n_valid = sum(c.valid for c in kept)
        left = cfg.max_warmup_repair_iterations
        fixed_all: list[Candidate] = []
        queue = sorted((c for c in kept if not c.valid), key=lambda c: -c.score_mse)
        for c in queue:
            if n_valid >= cfg.min_physics_passed_warmup or left <= 0 or self.budget.exhausted:
                break
            good = sorted((x for x in kept + fixed_all if x.valid), key=lambda x: -x.score_mse)
            fixed, used = repair(c, c, [], good, self.gen, self.rc, self.budget, None, left, self.rng)
            left -= used
            fixed_all.extend(fixed)
            n_valid += len(fixed)
        return fixed_all

    def _evolution_context(self) -> tuple[int, list[Candidate], PromptContext]:
        cfg = self.cfg
        island, exemplars = self.pool.sample_context(self.budget, cfg.functions_per_prompt, self.rng,
                                                     cfg.pace(), cfg.schedule())
        fp = fingerprint(exemplars[-1].residual)
        insights = retrieve_insights(self.pool.insights, fp, island, cfg.repair_history_num)
        ctx = self._ctx("evolution", exemplars=tuple(c.text for c in exemplars),
                        scores=tuple(c.score_mse for c in exemplars),
                        insights="\n".join(f"- {i.text}" for i in insights),
                        samples_per_prompt=cfg.samples_per_prompt)
        return island, exemplars, ctx

    def _propose(self, ctx: PromptContext):
        try:
            return self.gen.propose(ctx)
        except AuthError:
            raise
        except GenerationError as exc:
            log.warning("evolution generation failed: %s", exc)
            return None

    def _consume(self, out, island: int, exemplars: list[Candidate]) -> int:
        if out is None:
            return 0
        if not out.extracted:
            log.info("evolution call returned nothing: %s", out.diagnostic)
        n = 0
        parents = tuple(c.id for c in exemplars)
        for expr, why in out.extracted[: self.cfg.samples_per_prompt]:
            c = self.fit(expr, "evolution", parents, why)
            if c is None:
                break
            n += 1
            if not c.infeasible:
                self.pool.register(c, island)
        return n

    def evolve_step(self) -> int:
        """One sampler iteration; returns the number of candidates fitted."""
        if self.budget.exhausted:
            raise RuntimeError("sample budget exhausted")
        island, exemplars, ctx = self._evolution_context()
        return self._consume(self._propose(ctx), island, exemplars)

    def evolve_batch(self, executor: ThreadPoolExecutor) -> int:
        """``num_samplers`` generator calls in flight at once; fitting and
        registration stay serial, in submission order."""
        if self.budget.exhausted:
            raise RuntimeError("sample budget exhausted")
        jobs = []
        for _ in range(self.cfg.num_samplers):
            island, exemplars, ctx = self._evolution_context()
            jobs.append((executor.submit(self._propose, ctx), island, exemplars))
        n = 0
        for fut, island, exemplars in jobs:
            out = fut.result()
            if not self.budget.exhausted:
                n += self._consume(out, island, exemplars)
        return n

    def refine_all(self) -> None:
        for island in range(self.pool.num_islands):
            if self.budget.exhausted:
                return
            if self.pool.islands[island].best() is None:
                continue
            refine_round(self.pool, island, self.gen, self.rc, self.budget, self.rng)

    def report(self, t0: float) -> RunReport:
        best = self.pool.best(valid_only=True) or self.pool.best()
        if best is None:
            return RunReport(None, [], -math.inf, False, math.inf, math.inf, dict(self.stage_counts),
                             list(self.trace), time.perf_counter() - t0, self.budget.n_curr)
        # recomputed from the serialized form, not from cached values
        expr = parse(serialize(best.expr), max_nodes=None)
        nid, nood = evaluate(expr, best.params, self.d)
        return RunReport(serialize(expr), [float(p) for p in best.params], best.score_mse, bool(best.valid),
                         nid, nood, dict(self.stage_counts), list(self.trace), time.perf_counter() - t0,
                         self.budget.n_curr)


def write_trace(rows, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(TRACE_HEADER) + "\n")
        for n, best, t, rate in rows:
            fh.write(f"{n}\t{best!r}\t{t!r}\t{rate!r}\n")


def run(cfg: RunConfig, resume: str | Path | None = None, gen=None, d: Dataset | None = None,
        stop_after: int | None = None) -> RunReport:
    """Execute (or resume) a search and write report, trace and checkpoint under ``cfg.output_dir``.

    ``stop_after`` halts the loop early once that many samples are used
    (with a checkpoint), which is how interrupted runs are simulated.
    """
    t0 = time.perf_counter()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.jsonl"
    pool = ExperiencePool.load(resume) if resume else None
    r = Run(cfg, d=d, gen=gen, pool=pool)
    if resume:
        r.restore_state()
    next_ckpt = (r.budget.n_curr // cfg.checkpoint_every + 1) * cfg.checkpoint_every

    def maybe_checkpoint(force: bool = False):
        nonlocal next_ckpt
        if force or r.budget.n_curr >= next_ckpt:
            r.checkpoint(ckpt)
            if cfg.keep_checkpoints:
                r.pool.save(out_dir / f"checkpoint_{r.budget.n_curr:06d}.jsonl")
            next_ckpt = (r.budget.n_curr // cfg.checkpoint_every + 1) * cfg.checkpoint_every

    idle = 0
    executor = ThreadPoolExecutor(cfg.num_samplers) if cfg.num_samplers > 1 else None
    try:
        if r.phase == "warmup":
            r.warmup()
            r.phase = "evolution"
            maybe_checkpoint(force=True)
        while not r.budget.exhausted and len(r.pool):
            if stop_after is not None and r.budget.n_curr >= stop_after:
                break
            step = r.evolve_step() if executor is None else r.evolve_batch(executor)
            if step == 0:
                idle += 1
                if idle >= MAX_IDLE_STEPS:
                    log.warning("stopping: %d generator calls in a row produced nothing", idle)
                    break
            else:
                idle = 0
            if r.pool.total_registered >= r.next_reset:
                r.pool.reset_weak_islands(r.rng)
                r.next_reset = (r.pool.total_registered // cfg.reset_period + 1) * cfg.reset_period
            if r.budget.n_curr >= r.next_refine:
                r.refine_all()
                r.next_refine = (r.budget.n_curr // cfg.refine_interval + 1) * cfg.refine_interval
            maybe_checkpoint()
    except BaseException:
        r.checkpoint(ckpt)
        raise
    finally:
        if executor is not None:
            executor.shutdown()
    r.checkpoint(ckpt)
    rep = r.report(t0)
    write_trace(r.trace, out_dir / "trace.tsv")
    (out_dir / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return rep
