from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import httpx
import pytest

from priorsr.expr import UNARY_OPS, Binary, Param, Unary, Var, depth, free_vars, parse, serialize, walk
from priorsr.generator import (
    AuthError,
    EndpointConfig,
    GenerationError,
    GrammarConfig,
    GrammarGenerator,
    LLMGenerator,
    MissingSlotError,
    PromptContext,
    TransportError,
    canonical_params,
    extract_expressions,
    render_prompt,
)

FIXTURES = Path(__file__).parent / "fixtures_llm"
VARS = (("t", "time"), ("x", "position"), ("v", "velocity"))
TARGET = ("a", "acceleration")


def ctx(kind="evolution", **kw):
    base = dict(kind=kind, problem="a damped oscillator", variables=VARS, target=TARGET)
    if kind == "evolution":
        base["exemplars"] = ("-p0*x", "-p0*x - p1*v")
    base.update(kw)
    return PromptContext(**base)


# -- extraction -------------------------------------------------------------


def test_extract_drops_unparseable():
    kept, dropped = extract_expressions("EXPR: p0*x\nEXPR: bad((", ["x"])
    assert [serialize(e) for e, _ in kept] == ["p0*x"] and dropped == 1


def test_extract_fences_rationale_and_filter():
    text = "Here you go:\n```\nWHY: linear spring\nEXPR: `-p0*x`\n- EXPR: -p0*q\n```\n1. EXPR: sin(t)"
    kept, dropped = extract_expressions(text, ["t", "x", "v"])
    assert [serialize(e) for e, _ in kept] == ["-p0*x", "sin(t)"]
    assert kept[0][1] == "linear spring" and kept[1][1] == ""
    assert dropped == 1


def test_extract_limit():
    kept, _ = extract_expressions("EXPR: x\nEXPR: v\nEXPR: t", ["t", "x", "v"], limit=2)
    assert len(kept) == 2


# -- prompt context and templates --------------------------------------------


def test_context_slot_validation():
    with pytest.raises(ValueError):
        ctx("warmup", exemplars=("x",), analysis="a", rules="r")
    with pytest.raises(ValueError):
        ctx("evolution", exemplars=())
    with pytest.raises(ValueError):
        ctx("repair", exemplars=("x",), failure_reason="f")
    with pytest.raises(ValueError):
        ctx(samples_per_prompt=0)
    with pytest.raises(ValueError):
        ctx("bogus")


def test_evolution_render_contains_exemplars_and_insights():
    text = render_prompt(ctx(insights="- keep damping linear"))
    assert "v0: -p0*x" in text and "v1: -p0*x - p1*v" in text
    assert "keep damping linear" in text
    assert text.index("v0:") < text.index("v1:")
    assert "EXPR:" in text.splitlines()[-3] or "EXPR: <expression>" in text


def test_warmup_render_has_report_and_rules():
    text = render_prompt(ctx("warmup", exemplars=(), analysis="REPORT-XYZ", rules="1. RULE-ABC"))
    assert "REPORT-XYZ" in text and "RULE-ABC" in text and "EXACTLY 4" in text
    with pytest.raises(MissingSlotError):
        render_prompt(ctx("warmup", exemplars=(), analysis="", rules="r"))


def test_every_kind_renders_deterministically():
    cases = [
        ctx("warmup", exemplars=(), analysis="a", rules="r"),
        ctx(),
        ctx("refine", exemplars=("x",), analysis="diag", defect_variable="v", references=("p0*v",)),
        ctx("repair", exemplars=("x", "log(x)"), failure_reason="restoring failed", history=("attempt 1",)),
        ctx("residual_analysis", exemplars=("x",), analysis="stats"),
        ctx("improvement_analysis", exemplars=("x", "p0*x"), scores=(-2.0, -1.0)),
        ctx("reflection", exemplars=("x",), scores=(-1.0,), results=("p0*x | NotImproved, Valid",)),
    ]
    for c in cases:
        a, b = render_prompt(c), render_prompt(c)
        assert a == b and "{" not in a.replace("{{", "").split("JSON")[0]


def test_repair_render_slots():
    text = render_prompt(ctx("repair", exemplars=("-p0*x", "log(x)"), failure_reason="non-finite output",
                             history=("attempt 1: log(x) -> non-finite output",), references=("-p0*x - p1*v",)))
    assert "log(x)" in text and "non-finite output" in text and "attempt 1" in text and "-p0*x - p1*v" in text


# -- grammar generator -------------------------------------------------------


def test_grammar_deterministic():
    a = GrammarGenerator(7).propose(ctx())
    b = GrammarGenerator(7).propose(ctx())
    assert a.raw_text == b.raw_text
    assert [serialize(e) for e in a.expressions] == [serialize(e) for e in b.expressions]


def test_grammar_state_round_trip():
    g = GrammarGenerator(3)
    g.propose(ctx())
    state = g.get_state()
    nxt = g.propose(ctx()).raw_text
    h = GrammarGenerator(0)
    h.set_state(state)
    assert h.propose(ctx()).raw_text == nxt


def test_depth_cap_one_gives_leaves():
    g = GrammarGenerator(0, GrammarConfig(max_depth=1))
    out = g.propose(ctx("warmup", exemplars=(), analysis="a", rules="r", samples_per_prompt=50))
    assert all(depth(e) == 1 for e in out.expressions)


def test_closure_and_count():
    g = GrammarGenerator(11)
    for kind_ctx in (ctx(), ctx("warmup", exemplars=(), analysis="a", rules="r")):
        for _ in range(30):
            out = g.propose(kind_ctx)
            assert len(out.extracted) == kind_ctx.samples_per_prompt
            for e in out.expressions:
                assert free_vars(e) <= {"t", "x", "v"}
                assert depth(e) <= 6
                assert parse(serialize(e)) == e


def _labels(e):
    out = Counter()
    for n in walk(e):
        if isinstance(n, (Unary, Binary)):
            out[n.op] += 1
        elif isinstance(n, Param):
            out["param"] += 1
        elif isinstance(n, Var):
            out[n.name] += 1
        else:
            out["const"] += 1
    return out


def test_crossover_structure():
    import numpy as np

    g = GrammarGenerator(0)
    a, b = parse("p0*x"), parse("sin(t)")
    union = _labels(a) + _labels(b)
    for seed in range(50):
        child = g.crossover(np.random.default_rng(seed), a, b)
        extra = _labels(child) - union
        assert sum(extra.values()) <= 1


def test_unary_coverage_uniform_weights():
    g = GrammarGenerator(2024, GrammarConfig.uniform())
    wctx = ctx("warmup", exemplars=(), analysis="a", rules="r", samples_per_prompt=10)
    seen = set()
    for _ in range(100):
        for e in g.propose(wctx).expressions:
            seen |= {n.op for n in walk(e) if isinstance(n, Unary)}
    assert seen == set(UNARY_OPS)


def test_canonical_params():
    e = canonical_params(parse("p7*x + p2*v + p7"))
    assert serialize(e) == "p0*x + p1*v + p0"


def test_grammar_explain_returns_analysis():
    g = GrammarGenerator(0)
    assert g.explain(ctx("reflection", exemplars=("x",), results=("r",), analysis="summary")) == "summary"
    with pytest.raises(ValueError):
        g.explain(ctx())


# -- HTTP client ---------------------------------------------------------------


def _fixture(name):
    return json.loads((FIXTURES / name).read_text())


def _client(handler, **kw):
    sleeps = []
    gen = LLMGenerator(EndpointConfig(**kw), transport=httpx.MockTransport(handler), sleep=sleeps.append,
                       api_key="test-key")
    return gen, sleeps


def test_llm_happy_path():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers["Authorization"]
        return httpx.Response(200, json=_fixture("four_expressions.json"))

    gen, _ = _client(handler)
    out = gen.propose(ctx())
    assert len(out.extracted) == 4
    assert out.usage == {"prompt_tokens": 321, "completion_tokens": 87}
    assert seen["auth"] == "Bearer test-key"
    assert seen["body"]["model"] == "gpt-4o-mini"
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user"]
    assert gen.usage["requests"] == 1


def test_llm_fenced_response():
    gen, _ = _client(lambda r: httpx.Response(200, json=_fixture("fenced.json")))
    out = gen.propose(ctx())
    assert [serialize(e) for e in out.expressions] == ["-p0*x - p1*v", "-p0*x - p1*v^3"]
    assert out.dropped == 1


def test_llm_retries_then_fails():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500, text="boom")

    gen, sleeps = _client(handler)
    with pytest.raises(TransportError):
        gen.propose(ctx())
    assert len(calls) == 3 and sleeps == [1.0, 2.0]


def test_llm_recovers_after_transport_error():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ConnectError("down")
        return httpx.Response(200, json=_fixture("four_expressions.json"))

    gen, sleeps = _client(handler)
    assert len(gen.propose(ctx()).extracted) == 4 and sleeps == [1.0]


def test_llm_auth_fails_fast():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, json={"error": "bad key"})

    gen, sleeps = _client(handler)
    with pytest.raises(AuthError):
        gen.propose(ctx())
    assert len(calls) == 1 and sleeps == []


def test_llm_missing_key(monkeypatch):
    monkeypatch.delenv("PRIORSR_TEST_KEY", raising=False)
    gen = LLMGenerator(EndpointConfig(api_key_env="PRIORSR_TEST_KEY"),
                       transport=httpx.MockTransport(lambda r: httpx.Response(200)))
    with pytest.raises(AuthError):
        gen.propose(ctx())
    monkeypatch.setenv("PRIORSR_TEST_KEY", "k")
    gen2 = LLMGenerator(EndpointConfig(api_key_env="PRIORSR_TEST_KEY"),
                        transport=httpx.MockTransport(lambda r: httpx.Response(200, json=_fixture("fenced.json"))))
    assert gen2.propose(ctx()).extracted


def test_llm_all_unparseable_gives_empty_output():
    body = {"choices": [{"message": {"role": "assistant", "content": "EXPR: ((\nno formulas here"}}]}
    gen, _ = _client(lambda r: httpx.Response(200, json=body))
    out = gen.propose(ctx())
    assert out.extracted == () and out.dropped == 1 and out.diagnostic


def test_llm_malformed_body():
    gen, _ = _client(lambda r: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(GenerationError):
        gen.propose(ctx())


def test_llm_improvement_insight_parsed():
    content = '<thinking>added a cubic term</thinking>\n{"insight": "A cubic damping term fixed the tails."}'
    body = {"choices": [{"message": {"role": "assistant", "content": content}}]}
    gen, _ = _client(lambda r: httpx.Response(200, json=body))
    text = gen.explain(ctx("improvement_analysis", exemplars=("x", "p0*x"), scores=(-2.0, -1.0)))
    assert text == "A cubic damping term fixed the tails."


def test_llm_fixture_replay_deterministic():
    gen, _ = _client(lambda r: httpx.Response(200, json=_fixture("four_expressions.json")))
    a = gen.propose(ctx())
    b = gen.propose(ctx())
    assert a.raw_text == b.raw_text and [serialize(e) for e in a.expressions] == [
        serialize(e) for e in b.expressions]
