"""Generation contract: prompt context, output record and expression extraction."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from ..expr import MAX_NPARAMS, Expression, ExprSyntaxError, free_vars, param_indices, parse

KINDS = ("warmup", "evolution", "refine", "repair", "improvement_analysis", "residual_analysis", "reflection")
GENERATIVE_KINDS = ("warmup", "evolution", "refine", "repair")

# (min, max) exemplar counts per template; None means unbounded
EXEMPLAR_SLOTS = {
    "warmup": (0, 0),
    "evolution": (1, None),
    "refine": (1, 1),
    "repair": (2, 2),
    "improvement_analysis": (2, 2),
    "residual_analysis": (1, 1),
    "reflection": (1, 1),
}


class GenerationError(RuntimeError):
    """A generator could not produce a response."""


@dataclass(frozen=True)
class PromptContext:
    """Everything a template needs; text fields are pre-rendered by the caller.

    ``exemplars`` are serialized skeletons ordered worst to best (for repair:
    original then failed; for improvement analysis: original then improved).
    ``scores`` runs parallel to ``exemplars`` where a template shows scores.
    """

    kind: str
    problem: str
    variables: tuple[tuple[str, str], ...]
    target: tuple[str, str]
    exemplars: tuple[str, ...] = ()
    scores: tuple[float, ...] = ()
    insights: str = ""
    analysis: str = ""
    rules: str = ""
    samples_per_prompt: int = 4
    references: tuple[str, ...] = ()
    history: tuple[str, ...] = ()
    failure_reason: str = ""
    fix_hint: str = ""
    defect_variable: str = ""
    results: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if self.samples_per_prompt < 1:
            raise ValueError("samples_per_prompt must be at least 1")
        lo, hi = EXEMPLAR_SLOTS[self.kind]
        n = len(self.exemplars)
        if n < lo or (hi is not None and n > hi):
            raise ValueError(f"{self.kind} prompt takes {lo}..{hi if hi is not None else 'n'} exemplars, got {n}")
        if self.scores and len(self.scores) != n:
            raise ValueError("scores must align with exemplars")

    @property
    def variable_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.variables)


@dataclass(frozen=True)
class GeneratorOutput:
    raw_text: str
    extracted: tuple[tuple[Expression, str], ...] = ()
    usage: dict = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})
    dropped: int = 0
    diagnostic: str = ""

    def __post_init__(self):
        if not self.extracted and not self.diagnostic:
            object.__setattr__(self, "diagnostic", "no parseable expression in response")

    @property
    def expressions(self) -> list[Expression]:
        return [e for e, _ in self.extracted]


class Generator(Protocol):
    def propose(self, ctx: PromptContext) -> GeneratorOutput: ...

    def explain(self, ctx: PromptContext) -> str: ...

    def get_state(self) -> dict: ...

    def set_state(self, state: dict) -> None: ...


_EXPR_LINE = re.compile(r"^\s*(?:[-*>]\s*|\d+[.)]\s*)?\**EXPR\**\s*:\s*(.+?)\s*$", re.IGNORECASE)
_WHY_LINE = re.compile(r"^\s*(?:[-*>]\s*)?\**WHY\**\s*:\s*(.*?)\s*$", re.IGNORECASE)
_FENCE = re.compile(r"^\s*(```|~~~)")


def extract_expressions(
    text: str, variables: Sequence[str], limit: int | None = None
) -> tuple[list[tuple[Expression, str]], int]:
    """Collect ``EXPR:`` lines that parse and use only ``variables``.

    A ``WHY:`` line directly before an ``EXPR:`` line becomes its rationale.
    Markdown fences and inline backticks are ignored. Returns the kept
    ``(expression, rationale)`` pairs and the number of dropped lines.
    """
    allowed = set(variables)
    kept: list[tuple[Expression, str]] = []
    dropped = 0
    why = ""
    for line in text.splitlines():
        if _FENCE.match(line):
            continue
        m = _WHY_LINE.match(line)
        if m:
            why = m.group(1)
            continue
        m = _EXPR_LINE.match(line)
        if not m:
            continue
        body = m.group(1).strip().strip("`").strip()
        rationale, why = why, ""
        try:
            e = parse(body)
        except (ExprSyntaxError, ValueError, RecursionError):
            dropped += 1
            continue
        if not free_vars(e) <= allowed or len(param_indices(e)) > MAX_NPARAMS:
            dropped += 1
            continue
        if limit is not None and len(kept) >= limit:
            continue
        kept.append((e, rationale))
    return kept, dropped
