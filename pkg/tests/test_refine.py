from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import CRK
from priorsr.constraints import DataStats, catalog
from priorsr.datagen import Dataset, VariableInfo, make_dataset
from priorsr.expr import parse
from priorsr.generator import GeneratorOutput, GrammarGenerator
from priorsr.optimizer import fit_with_retries
from priorsr.pool import Candidate, ExperiencePool
from priorsr.refine import (
    Insight,
    RefineConfig,
    RefineContext,
    RepairRecord,
    cosine,
    find_similar,
    fingerprint,
    moments,
    permutation_importance,
    profile_residual,
    refine_round,
    reflect,
    repair,
    residual_profile,
    retrieve_insights,
    structural_diff,
)
from priorsr.scoring import BudgetState


def _cand(text, residual=None, score=-1.0, valid=True, cid=None):
    return Candidate(parse(text), np.ones(10), score, valid, None, None if residual is None else np.asarray(
        residual, dtype=float), id=cid)


def _line_dataset():
    x = np.linspace(0, 1, 41)
    return Dataset("line", (VariableInfo("x"), VariableInfo("z")), "y", np.column_stack([x, x[::-1] * 0 + 1]), x,
                   ["train"] * 41)


# -- profiling -------------------------------------------------------------------


def test_perfect_candidate_profile():
    d = make_dataset("crk")
    c = Candidate(parse(CRK), np.ones(10), 0.0, True)
    p = residual_profile(c, d)
    assert p.nmse == 0 and p.bias == 0
    assert np.nanmax(p.binned_mse["A"]) == 0


def test_two_point_moments():
    bias, skew, kurt = moments(np.array([-1.0, 1.0]))
    assert bias == 0 and skew == 0 and kurt == pytest.approx(-2.0, abs=1e-15)


def test_zero_variance_moments():
    assert moments(np.full(4, 2.0)) == (2.0, 0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_subnormal=False), min_size=1, max_size=20), st.floats(0.1, 10))
def test_symmetric_multiset_has_zero_skew(vals, c):
    r = np.array(vals + [-v for v in vals])
    assert moments(r)[1] == pytest.approx(0.0, abs=1e-9)
    assert moments(np.array([-c, c, -c, c]))[2] == pytest.approx(-2.0, abs=1e-12)


def test_defect_variable_and_top_bin():
    d = _line_dataset()
    c = Candidate(parse("0"), np.ones(10), -1.0, True)
    p = residual_profile(c, d)
    assert p.defect_variable == "x"
    assert int(np.nanargmax(p.binned_mse["x"])) == 7
    # bins partition the range
    assert p.bin_edges["x"][0] == 0.0 and p.bin_edges["x"][-1] == 1.0 and len(p.bin_edges["x"]) == 9
    top = p.high_error_regions[0]
    assert top.variable == "x" and top.hi == 1.0
    assert "x" in p.render()


def test_regions_capped_at_three():
    d = make_dataset("ecoli")
    c = Candidate(parse("B"), np.ones(10), -1.0, True)
    assert len(residual_profile(c, d).high_error_regions) == 3


# -- retrieval ---------------------------------------------------------------------


def test_find_similar_examples():
    cands = [_cand("x", [1, 1], cid=0), _cand("x", [0, 1], cid=1), _cand("x", [0, 0], cid=2),
             _cand("x", [-1, 0], cid=3), _cand("x", [1, 0, 0], cid=4)]
    got = find_similar(np.array([1.0, 0.0]), cands, top_k=5)
    assert [c.id for c, _ in got] == [0, 1, 3]
    assert got[0][1] == pytest.approx(0.70710678, abs=1e-8) and got[1][1] == 0.0 and got[2][1] == -1.0
    assert find_similar(np.array([1.0, 0.0]), cands, top_k=1)[0][0].id == 0
    assert find_similar(np.zeros(2), cands) == []


def test_identical_residual_ranks_first():
    r = np.array([0.3, -1.2, 2.0])
    got = find_similar(r, [_cand("x", -r, cid=0), _cand("x", r * 2, cid=1)])
    assert got[0][0].id == 1 and got[0][1] == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_cosine_symmetric_and_bounded(a, b):
    a, b = np.array(a), np.array(b)
    s1, s2 = cosine(a, b), cosine(b, a)
    assert s1 == s2
    if s1 is not None:
        assert -1.0 <= s1 <= 1.0


def test_permutation_importance():
    d = _line_dataset()
    imp = permutation_importance(Candidate(parse("x"), np.ones(10), 0.0, True), d, seed=3)
    assert imp["x"] > 0 and imp["z"] == 0
    assert imp == permutation_importance(Candidate(parse("x"), np.ones(10), 0.0, True), d, seed=3)


# -- insights and records ---------------------------------------------------------


def test_insight_fingerprint_norm():
    fp = fingerprint(np.array([3.0, 4.0]))
    assert abs(np.linalg.norm(fp) - 1.0) <= 1e-12
    assert fingerprint(np.zeros(3)) is None
    with pytest.raises(ValueError):
        Insight("t", "success", 0, np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        Insight("t", "other", 0)


def test_insight_record_round_trip():
    ins = Insight("use a cubic", "success", 2, fingerprint(np.array([1.0, 2.0, 2.0])), 17)
    back = Insight.from_record(ins.to_record())
    assert back.to_record() == ins.to_record()
    np.testing.assert_array_equal(back.fingerprint, ins.fingerprint)


def test_retrieve_insights_cross_island_successes_only():
    fp = fingerprint(np.array([1.0, 0.0]))
    pool = [Insight("own failure", "failure", 0, fp), Insight("other failure", "failure", 1, fp),
            Insight("other success", "success", 1, fingerprint(np.array([1.0, 1.0]))),
            Insight("far success", "success", 2, fingerprint(np.array([-1.0, 0.0])))]
    got = [i.text for i in retrieve_insights(pool, fp, island=0, top_k=3)]
    assert got == ["own failure", "other success", "far success"]


def test_repair_record_bounds():
    assert RepairRecord("x", "r", 3).render().startswith("attempt 3")
    with pytest.raises(ValueError):
        RepairRecord("x", "r", 4)
    r = RepairRecord("x", "why", 2, "hint")
    assert RepairRecord.from_dict(r.to_dict()) == r


def test_structural_diff():
    assert structural_diff(parse("p0*A"), parse("p0*A - p1*A^2")) == "added mul, pow, sub"
    assert "removed" in structural_diff(parse("sin(A)"), parse("A"))


# -- loops -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def crk():
    d = make_dataset("crk")
    cs = catalog("crk")
    return d, cs, DataStats.from_dataset(d)


def _rc(crk, **kw):
    d, cs, stats = crk
    return RefineContext(d=d, cs=cs, stats=stats, problem="reaction rate", variables=(("A", "conc"),),
                         target=("dA_dt", ""), **kw)


class Scripted:
    """Generator that replays fixed expression lists, one list per call."""

    def __init__(self, batches):
        self.batches = list(batches)
        self.calls = 0
        self.contexts = []

    def propose(self, ctx):
        self.contexts.append(ctx)
        batch = self.batches[min(self.calls, len(self.batches) - 1)]
        self.calls += 1
        return GeneratorOutput("", tuple((parse(t), "") for t in batch[: ctx.samples_per_prompt]))

    def explain(self, ctx):
        return ctx.analysis

    def get_state(self):
        return {}

    def set_state(self, s):
        pass


def _seeded_pool(crk, text="p0*A^2 - p1*A^3"):
    d, cs, stats = crk
    pool = ExperiencePool(2)
    c = fit_with_retries(parse(text), d, cs, stats=stats)
    pool.register(c, 0)
    return pool


def test_repair_noop_for_valid(crk):
    c = _seeded_pool(crk).islands[0].best()
    assert repair(c, c, [], [], Scripted([["A"]]), _rc(crk), BudgetState(0, 100)) == ([], 0)


def test_repair_rounds_bounded_and_history_capped(crk):
    d, cs, stats = crk
    failed = fit_with_retries(parse("p0*A"), d, cs, stats=stats)
    gen = Scripted([["p0*A + p1"]])
    history = [RepairRecord(f"h{i}", "r", 1) for i in range(5)]
    fixed, used = repair(failed, failed, history, [], gen, _rc(crk), BudgetState(0, 100))
    assert fixed == [] and used == 3 and gen.calls == 3
    shown = gen.contexts[0].history
    assert len(shown) == 3 and shown[-1].startswith("attempt 1: h4")
    assert [h.attempt for h in history[5:]] == [1, 2, 3]


def test_repair_succeeds(crk):
    d, cs, stats = crk
    failed = fit_with_retries(parse("p0*A"), d, cs, stats=stats)
    gen = Scripted([["p0*A^2 - p1*A^3"]])
    budget = BudgetState(0, 100)
    fixed, used = repair(failed, failed, [], [], gen, _rc(crk), budget)
    assert used == 1 and len(fixed) == 1 and fixed[0].valid and budget.n_curr == 1


def test_refine_request_budget(crk):
    pool = _seeded_pool(crk)
    gen = Scripted([["p0*A^2 - p1*A^4", "p0*A^2 - p1*A^3 + p2*A"]])
    res = refine_round(pool, 0, gen, _rc(crk), BudgetState(0, 1000))
    assert res.requested == 10 and res.calls == 5
    assert all(c.samples_per_prompt <= 2 for c in gen.contexts)


def test_refine_stops_on_empty_generator(crk):
    pool = _seeded_pool(crk)
    res = refine_round(pool, 0, Scripted([[]]), _rc(crk), BudgetState(0, 1000))
    assert res.requested == 0 and res.diagnostic and res.insight is None


def test_refine_repair_iterations_capped(crk):
    pool = _seeded_pool(crk)
    res = refine_round(pool, 0, Scripted([["p0*A"]]), _rc(crk), BudgetState(0, 1000))
    assert res.repair_iterations <= 6
    assert len(pool.repair_records) == res.repair_iterations


def test_refine_on_ground_truth_never_regresses(crk):
    pool = _seeded_pool(crk, "p1*A^2/(p2*A^4 + 1) - p0*A^2")
    before = pool.islands[0].best().score_mse
    res = refine_round(pool, 0, GrammarGenerator(5), _rc(crk), BudgetState(0, 1000))
    assert pool.islands[0].best().score_mse >= before
    assert all(c.valid for c in res.registered)


def test_refine_reproducible(crk):
    outs = []
    for _ in range(2):
        pool = _seeded_pool(crk)
        res = refine_round(pool, 0, GrammarGenerator(3), _rc(crk), BudgetState(0, 1000),
                           np.random.default_rng(4))
        outs.append(([c.text for c, _ in res.attempts], [c.score_mse for c in res.registered],
                     res.insight.text if res.insight else None))
    assert outs[0] == outs[1]


def test_refine_success_insight_and_history(crk):
    pool = _seeded_pool(crk, "p0*A^2 - p1*A^4")
    res = refine_round(pool, 0, Scripted([["p1*A^2/(p2*A^4 + 1) - p0*A^2"]]), _rc(crk), BudgetState(0, 1000))
    assert res.insight.kind == "success"
    assert pool.insights[-1] is res.insight
    assert pool.refine_history[-1]["improved"] == "p1*A^2/(p2*A^4 + 1) - p0*A^2"
    assert abs(np.linalg.norm(res.insight.fingerprint) - 1.0) <= 1e-12


def test_reflect_kinds(crk):
    d, cs, stats = crk
    orig = fit_with_retries(parse("p0*A^2 - p1*A^4"), d, cs, stats=stats)
    better = fit_with_retries(parse(CRK.replace("0.1899", "p0")), d, cs, stats=stats)
    worse = fit_with_retries(parse("p0*A"), d, cs, stats=stats)
    gen = GrammarGenerator(0)
    assert reflect(orig, [(better, True)], gen, _rc(crk), 0, 10).kind == "success"
    ins = reflect(orig, [(worse, False)], gen, _rc(crk), 0, 10)
    assert ins.kind == "failure" and "no gain" in ins.text
    with pytest.raises(ValueError):
        reflect(orig, [], gen, _rc(crk), 0, 10)


def test_refine_budget_exhaustion(crk):
    pool = _seeded_pool(crk)
    budget = BudgetState(0, 3)
    refine_round(pool, 0, GrammarGenerator(1), _rc(crk), budget)
    assert budget.n_curr == 3


def test_refine_config_calls():
    assert RefineConfig().max_calls == 10
    assert profile_residual(np.zeros(3), np.arange(3.0), {"a": np.arange(3.0)}).nmse == 0
