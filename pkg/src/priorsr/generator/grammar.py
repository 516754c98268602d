"""Seeded grammar-based generator: random trees plus variation of exemplars.

Fixed settings (not tuned on any benchmark):

* random trees use the grow method with depth cap 6; a non-root node becomes
  a leaf with probability 0.35 (0.1 at the root), else unary with 0.3 or
  binary with 0.7;
* operators are drawn with ``DEFAULT_BINARY_WEIGHTS`` and
  ``DEFAULT_UNARY_WEIGHTS``, which favour plain arithmetic;
  ``GrammarConfig.uniform()`` weights every operator equally;
* leaves are a variable (0.5), a fresh constant slot p_i (0.4) or a literal
  from ``literals`` (0.1);
* with exemplars, each proposal applies subtree mutation, subtree crossover,
  operator substitution or a fresh tree with probabilities 0.4/0.3/0.2/0.1;
  the parent is drawn with weight proportional to its rank (best exemplar
  most likely).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from ..expr import (
    BINARY_OPS,
    MAX_NPARAMS,
    UNARY_OPS,
    Binary,
    Const,
    Expression,
    ExprSyntaxError,
    Param,
    Unary,
    Var,
    children,
    depth,
    length,
    parse,
    serialize,
)
from .base import GENERATIVE_KINDS, GeneratorOutput, PromptContext

OPERATIONS = ("mutation", "crossover", "substitution", "fresh")


DEFAULT_BINARY_WEIGHTS = {"add": 3.0, "sub": 3.0, "mul": 3.0, "div": 1.5, "pow": 1.5, "max": 0.5, "min": 0.5}
DEFAULT_UNARY_WEIGHTS = {"neg": 1.0, "exp": 1.0, "log": 0.5, "sqrt": 0.5, "sin": 0.5, "cos": 0.5, "tanh": 0.5,
                         "abs": 0.25, "step": 0.25}


def _uniform(ops) -> dict:
    return {op: 1.0 for op in ops}


@dataclass(frozen=True)
class GrammarConfig:
    max_depth: int = 6
    max_nodes: int = 60
    unary_weights: dict = field(default_factory=lambda: dict(DEFAULT_UNARY_WEIGHTS))
    binary_weights: dict = field(default_factory=lambda: dict(DEFAULT_BINARY_WEIGHTS))
    p_leaf: float = 0.35
    p_leaf_root: float = 0.1
    p_unary: float = 0.3
    leaf_mix: tuple = (0.5, 0.4, 0.1)
    literals: tuple = (0.5, 1.0, 2.0, 3.0)
    operation_mix: tuple = (0.4, 0.3, 0.2, 0.1)

    @classmethod
    def uniform(cls, **kw) -> "GrammarConfig":
        return cls(unary_weights=_uniform(UNARY_OPS), binary_weights=_uniform(BINARY_OPS), **kw)

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        for name, w, ops in (("unary", self.unary_weights, UNARY_OPS), ("binary", self.binary_weights, BINARY_OPS)):
            if set(w) - set(ops) or not any(v > 0 for v in w.values()):
                raise ValueError(f"bad {name} operator weights")
        if abs(sum(self.operation_mix) - 1.0) > 1e-12 or len(self.operation_mix) != 4:
            raise ValueError("operation_mix must be four probabilities summing to 1")


# ---------------------------------------------------------------------------
# tree surgery


def _paths(e: Expression, prefix: tuple = (), d: int = 1):
    """Yield (path, node, depth-of-node) in pre-order."""
    yield prefix, e, d
    for i, c in enumerate(children(e)):
        yield from _paths(c, prefix + (i,), d + 1)


def _replace(e: Expression, path: tuple, new: Expression) -> Expression:
    if not path:
        return new
    i, rest = path[0], path[1:]
    if isinstance(e, Unary):
        return Unary(e.op, _replace(e.child, rest, new))
    if i == 0:
        return Binary(e.op, _replace(e.left, rest, new), e.right)
    return Binary(e.op, e.left, _replace(e.right, rest, new))


def canonical_params(e: Expression) -> Expression:
    """Renumber constant slots p0, p1, ... by first appearance; slots past the
    tenth become the literal 1."""
    mapping: dict[int, int] = {}

    def go(n):
        if isinstance(n, Param):
            if n.index not in mapping:
                if len(mapping) >= MAX_NPARAMS:
                    return Const(1.0)
                mapping[n.index] = len(mapping)
            return Param(mapping[n.index])
        if isinstance(n, Unary):
            return Unary(n.op, go(n.child))
        if isinstance(n, Binary):
            left = go(n.left)
            return Binary(n.op, left, go(n.right))
        return n

    return go(e)


def _shift_params(e: Expression, offset: int) -> Expression:
    """Move slot indices up by ``offset`` (mod 10) so spliced subtrees get their own slots."""
    if isinstance(e, Param):
        return Param((e.index + offset) % MAX_NPARAMS)
    if isinstance(e, Unary):
        return Unary(e.op, _shift_params(e.child, offset))
    if isinstance(e, Binary):
        return Binary(e.op, _shift_params(e.left, offset), _shift_params(e.right, offset))
    return e


class GrammarGenerator:
    """Offline generator; output depends only on (seed, call count, ctx)."""

    def __init__(self, seed: int = 0, config: GrammarConfig = GrammarConfig()):
        self.seed = int(seed)
        self.config = config
        self.calls = 0
        self._lock = threading.Lock()
        u = sorted(config.unary_weights.items())
        b = sorted(config.binary_weights.items())
        self._unary = ([k for k, _ in u], np.array([v for _, v in u]) / sum(v for _, v in u))
        self._binary = ([k for k, _ in b], np.array([v for _, v in b]) / sum(v for _, v in b))

    # state for checkpoints
    def get_state(self) -> dict:
        return {"seed": self.seed, "calls": self.calls}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.calls = int(state["calls"])

    # ------------------------------------------------------------------
    def random_tree(self, rng: np.random.Generator, variables, max_depth: int | None = None) -> Expression:
        max_depth = self.config.max_depth if max_depth is None else max_depth
        counter = [0]
        return canonical_params(self._grow(rng, list(variables), max_depth, True, counter))

    def _leaf(self, rng, variables, counter) -> Expression:
        cfg = self.config
        kind = rng.choice(3, p=np.asarray(cfg.leaf_mix) / sum(cfg.leaf_mix))
        if kind == 0 and variables:
            return Var(variables[int(rng.integers(len(variables)))])
        if kind == 1 and counter[0] < MAX_NPARAMS:
            counter[0] += 1
            return Param(counter[0] - 1)
        return Const(float(cfg.literals[int(rng.integers(len(cfg.literals)))]))

    def _grow(self, rng, variables, budget, root, counter) -> Expression:
        cfg = self.config
        p_leaf = cfg.p_leaf_root if root else cfg.p_leaf
        if budget <= 1 or rng.random() < p_leaf:
            return self._leaf(rng, variables, counter)
        if rng.random() < cfg.p_unary:
            ops, w = self._unary
            op = ops[int(rng.choice(len(ops), p=w))]
            return Unary(op, self._grow(rng, variables, budget - 1, False, counter))
        ops, w = self._binary
        op = ops[int(rng.choice(len(ops), p=w))]
        left = self._grow(rng, variables, budget - 1, False, counter)
        return Binary(op, left, self._grow(rng, variables, budget - 1, False, counter))

    # ------------------------------------------------------------------
    def mutate(self, rng, parent: Expression, variables) -> Expression:
        nodes = list(_paths(parent))
        path, _, d = nodes[int(rng.integers(len(nodes)))]
        budget = max(1, self.config.max_depth - d + 1)
        sub = _shift_params(self.random_tree(rng, variables, min(budget, 3)), 5)
        return _replace(parent, path, sub)

    def crossover(self, rng, a: Expression, b: Expression) -> Expression:
        nodes = list(_paths(a))
        path, _, d = nodes[int(rng.integers(len(nodes)))]
        budget = max(1, self.config.max_depth - d + 1)
        donors = [n for _, n, _ in _paths(b) if depth(n) <= budget]
        sub = donors[int(rng.integers(len(donors)))]
        return _replace(a, path, _shift_params(sub, 5))

    def substitute(self, rng, parent: Expression, variables) -> Expression:
        internal = [(p, n) for p, n, _ in _paths(parent) if isinstance(n, (Unary, Binary))]
        if not internal:
            return self._leaf(rng, list(variables), [0])
        path, node = internal[int(rng.integers(len(internal)))]
        if isinstance(node, Unary):
            ops = [o for o in self._unary[0] if o != node.op and self.config.unary_weights.get(o, 0) > 0]
            if not ops:
                return parent
            return _replace(parent, path, Unary(ops[int(rng.integers(len(ops)))], node.child))
        ops = [o for o in self._binary[0] if o != node.op and self.config.binary_weights.get(o, 0) > 0]
        if not ops:
            return parent
        return _replace(parent, path, Binary(ops[int(rng.integers(len(ops)))], node.left, node.right))

    def _vary(self, rng, parents: list[Expression], variables) -> tuple[Expression, str]:
        k = len(parents)
        w = np.arange(1, k + 1, dtype=float)
        pick = int(rng.choice(k, p=w / w.sum()))
        op = OPERATIONS[int(rng.choice(4, p=np.asarray(self.config.operation_mix)))]
        if op == "mutation":
            return self.mutate(rng, parents[pick], variables), f"subtree mutation of v{pick}"
        if op == "crossover":
            other = int(rng.integers(k))
            return self.crossover(rng, parents[pick], parents[other]), f"crossover of v{pick} with v{other}"
        if op == "substitution":
            return self.substitute(rng, parents[pick], variables), f"operator substitution in v{pick}"
        return self.random_tree(rng, variables), "fresh random tree"

    def _acceptable(self, e: Expression) -> bool:
        return depth(e) <= max(self.config.max_depth, 1) and length(e) <= self.config.max_nodes

    def propose(self, ctx: PromptContext) -> GeneratorOutput:
        with self._lock:
            rng = np.random.default_rng([self.seed, self.calls])
            self.calls += 1
        variables = ctx.variable_names
        parents = []
        for text in ctx.exemplars:
            try:
                parents.append(parse(text))
            except (ExprSyntaxError, ValueError):
                continue
        out = []
        for _ in range(ctx.samples_per_prompt):
            for _attempt in range(20):
                if parents:
                    e, why = self._vary(rng, parents, variables)
                else:
                    e, why = self.random_tree(rng, variables), "fresh random tree"
                e = canonical_params(e)
                if self._acceptable(e):
                    break
            else:
                e, why = self.random_tree(rng, variables), "fresh random tree"
            out.append((e, why))
        raw = "\n".join(f"WHY: {why}\nEXPR: {serialize(e)}" for e, why in out)
        return GeneratorOutput(raw_text=raw, extracted=tuple(out))

    def explain(self, ctx: PromptContext) -> str:
        """Analysis prompts are answered with the caller's pre-computed summary."""
        if ctx.kind in GENERATIVE_KINDS:
            raise ValueError(f"{ctx.kind} contexts go through propose()")
        return ctx.analysis
