"""Prompt templates for each context kind, written for the expression DSL."""

from __future__ import annotations

from .base import PromptContext


class MissingSlotError(ValueError):
    """A template slot required by the context kind is empty."""


SYSTEM_MESSAGE = (
    "You help discover closed-form equations for scientific systems.\n"
    "Propose equations that respect the physical meaning of the inputs.\n"
    "Fitted constants are NON-NEGATIVE, so write any minus sign explicitly in the structure.\n"
    "Think the problem through briefly, then answer in the requested format."
)

DSL_NOTE = (
    "Expression language: numbers, the listed variables, fitted constants p0..p9 "
    "(each >= 0; write minus signs explicitly), the operators + - * / ^, and the "
    "functions sin cos tanh exp log sqrt abs step max min. Use at most 10 constants."
)


def _format_block(n: int) -> str:
    return (
        f"Give {n} equation(s). Put each one on its own line as\n"
        "EXPR: <expression>\n"
        "optionally preceded by a line\n"
        "WHY: <one-sentence motivation>\n"
        + DSL_NOTE
    )


def _variables(ctx: PromptContext) -> str:
    lines = [f"- {name}: {desc}" if desc else f"- {name}" for name, desc in ctx.variables]
    tname, tdesc = ctx.target
    lines.append(f"- {tname} (output): {tdesc}" if tdesc else f"- {tname} (output)")
    return "\n".join(lines)


def _require(ctx: PromptContext, *names: str) -> None:
    for name in names:
        if not getattr(ctx, name):
            raise MissingSlotError(f"{ctx.kind} prompt needs a non-empty {name!r}")


def _score(ctx: PromptContext, i: int) -> str:
    return f"{ctx.scores[i]:.6g}" if ctx.scores else "n/a"


def _bullets(items, empty: str) -> str:
    return "\n".join(f"- {x}" for x in items) if items else empty


def _warmup(ctx: PromptContext) -> str:
    _require(ctx, "analysis", "rules")
    tname, tdesc = ctx.target
    return f"""## Task: propose equation structures from data
You are looking for closed-form equations that describe {ctx.problem}.
Using the data summary, the variable list and the rules below, write EXACTLY {ctx.samples_per_prompt} different candidate equations for {tname}{f" ({tdesc})" if tdesc else ""}.

## Variables
{_variables(ctx)}

## Data summary
{ctx.analysis}

## Rules every equation must respect
{ctx.rules}

Reason about the mechanism before writing anything, and give each equation a one-line physical motivation.

## Response format
{_format_block(ctx.samples_per_prompt)}
"""


def _evolution(ctx: PromptContext) -> str:
    k = len(ctx.exemplars)
    shown = "\n".join(f"v{i}: {e}" for i, e in enumerate(ctx.exemplars))
    return f"""{ctx.problem}

## Variables
{_variables(ctx)}

## Lessons from earlier attempts
{ctx.insights or "(none recorded yet)"}
Let these lessons and the equations below steer the next proposal. An entirely different structure is welcome when it promises a lower error.

## Previous equations
Ordered by score: v0 scored lowest{f" and v{k - 1} highest" if k > 1 else ""}.
{shown}

## Your turn
Write improved successors of v{k - 1}.

## Response format
{_format_block(ctx.samples_per_prompt)}
"""


def _history_block(ctx: PromptContext) -> str:
    return "\n".join(ctx.history) if ctx.history else ""


def _refine(ctx: PromptContext) -> str:
    _require(ctx, "analysis")
    hints = "\n".join(x for x in (ctx.insights, _history_block(ctx)) if x)
    refs = _bullets(ctx.references, "")
    if refs:
        hints = (hints + "\n" if hints else "") + "Equations with similar error patterns:\n" + refs
    defect = ctx.defect_variable or "the most error-prone variable"
    return f"""## Task: improve an equation using its residuals
You are refining closed-form equations that describe {ctx.problem}.
Using the residual diagnostics, write EXACTLY {ctx.samples_per_prompt} revised versions of the current best equation.

## Variables
{_variables(ctx)}

## Current best equation
{ctx.exemplars[0]}

## Hints from experience
{hints or "(no earlier refinements)"}

## Residual diagnostics
{ctx.analysis}

## How to refine
- Remove the main structural weakness the diagnostics point to.
- Concentrate on the input regions with the largest errors.
- Study how each input drives the output across its range.
- Give extra attention to {defect}, whose errors vary the most.
- Start over with a new structure if small edits cannot fix the problem.

## Rules every equation must respect
{ctx.rules or "(none)"}

## Response format
{_format_block(ctx.samples_per_prompt)}
"""


def _repair(ctx: PromptContext) -> str:
    _require(ctx, "failure_reason")
    original, failed = ctx.exemplars
    defect = ctx.defect_variable or "the most error-prone variable"
    step2 = (
        "Do not repeat the structures listed under earlier failed repairs."
        if ctx.history
        else "No earlier repair exists, so start from the failed equation."
    )
    return f"""## Task: repair an equation that breaks a prior rule
You fix equation structures for {ctx.problem} when they violate known rules.
Treat the rules as the main guide and the residual diagnostics as supporting evidence, and write EXACTLY {ctx.samples_per_prompt} repaired variant(s) that remove the failure by changing the structure.

## Variables
{_variables(ctx)}

## Current best equation
{original}

## Residual diagnostics
{ctx.analysis or "(not available)"}

## Prior rules
{ctx.rules or "(none)"}
Read the failure against these rules first. Use the diagnostics only to locate the terms or variable dependencies behind it, paying most attention to {defect}.

## Valid examples
{_bullets(ctx.references, "(none available)")}

## Original equation
{original}

## Failed equation
{failed}

## Why it failed
{ctx.failure_reason}

## Suggested fix
{ctx.fix_hint or "(none)"}

## Earlier failed repairs
{_history_block(ctx) or "(none)"}

## Steps
1. Work out why the equation failed, using the failure reason and the rules.
2. {step2}
3. Use at most 10 constants.

## Response format
{_format_block(ctx.samples_per_prompt)}
"""


def _residual_analysis(ctx: PromptContext) -> str:
    _require(ctx, "analysis")
    inputs = ", ".join(ctx.variable_names)
    return f"""## Task: explain residual patterns
You diagnose symbolic-regression fits for {ctx.problem}.
Read the residual statistics and explain why the current equation misses the data.

## Variables
{_variables(ctx)}

## Current equation
{ctx.exemplars[0]}

## Residual statistics
{ctx.analysis}

## What to cover
- The main structural weakness of the equation.
- The input ranges where the errors concentrate.
- How each input ({inputs}) moves the output {ctx.target[0]} in different intervals, and how the inputs interact.
- Which kinds of terms (nonlinear, interaction, saturating) would close the gap.
Prefer structural advice over parameter tweaks.

## Response format
Reply with one JSON object with the keys "main_weakness", "worst_regions", "variable_effects" and "proposed_changes".
"""


def _improvement_analysis(ctx: PromptContext) -> str:
    original, improved = ctx.exemplars
    gain = ""
    if ctx.scores:
        d = ctx.scores[1] - ctx.scores[0]
        pct = 100.0 * d / abs(ctx.scores[0]) if ctx.scores[0] else float("inf")
        gain = f"{d:.6g} ({pct:.3g}%)"
    return f"""## Task: explain why an equation improved
You study equation revisions for {ctx.problem} and turn them into reusable advice.

## How scores work
The score is the negative mean squared error on the training data, so values closer to zero are better.

## Variables
{_variables(ctx)}

## Original equation (score {_score(ctx, 0)})
{original}

## Residual findings for the original
{ctx.analysis or "(not available)"}

## Improved equation (score {_score(ctx, 1)})
{improved}

## Gain
{gain or "n/a"}

## Questions
1. Which structural changes were made?
2. How do those changes address the residual patterns of the original?
3. What single piece of advice would help similar equations?
4. Open with a <thinking> block that walks through the changes.

## Response format
First the <thinking> ... </thinking> block, then a JSON object {{"insight": "<changes, why they work here, one takeaway>"}}.
"""


def _reflection(ctx: PromptContext) -> str:
    _require(ctx, "results")
    return f"""## Task: reflect on a refinement round
You are an expert in equation discovery for {ctx.problem}.

## Variables
{_variables(ctx)}

{len(ctx.results)} candidate(s) came out of refining the equation below.

## Equation that was refined (score {_score(ctx, 0)}, higher is better, score = -MSE)
{ctx.exemplars[0]}

Each result line says whether it beat that score (Improved or NotImproved) and whether it satisfied the rules (Valid or Invalid).

## Results
{chr(10).join(ctx.results)}

Summarise what these results teach for later search, as briefly as possible.

## What helped
Up to three structural features behind the gains, with a reason for each.

## What hurt
Rule violations: structural causes of Invalid results.
No gain: structural limits of the Valid but NotImproved results.

## Next steps
Up to three concrete things to try or avoid.

Talk about structure, not parameter values.
"""


_RENDERERS = {
    "warmup": _warmup,
    "evolution": _evolution,
    "refine": _refine,
    "repair": _repair,
    "residual_analysis": _residual_analysis,
    "improvement_analysis": _improvement_analysis,
    "reflection": _reflection,
}


def render_prompt(ctx: PromptContext) -> str:
    """Deterministic prompt text for ``ctx``; raises MissingSlotError on an empty required slot."""
    return _RENDERERS[ctx.kind](ctx)


def messages_for(ctx: PromptContext) -> list[dict]:
    """Chat messages (system + user) for ``ctx``."""
    return [{"role": "system", "content": SYSTEM_MESSAGE}, {"role": "user", "content": render_prompt(ctx)}]
