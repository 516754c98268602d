"""Expression DSL: tree types, parser, canonical printer and guarded evaluator.

Grammar (whitespace-insensitive)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?            # right-associative, '**' accepted
    atom   := NUMBER | PARAM | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'

``PARAM`` is ``p0`` .. ``p9``. A minus sign directly in front of a numeric
literal folds into a negative constant unless the literal is the base of a
power, so ``-3`` is ``Const(-3)`` while ``-3^2`` is ``neg(3^2)``.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

MAX_NPARAMS = 10
DEFAULT_MAX_NODES = 200

UNARY_OPS = ("neg", "sin", "cos", "tanh", "exp", "log", "sqrt", "abs", "step")
BINARY_OPS = ("add", "sub", "mul", "div", "pow", "max", "min")

_INFIX = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
_FROM_INFIX = {v: k for k, v in _INFIX.items()}
# function-call spellings accepted by the parser
_UNARY_CALLS = {op: op for op in UNARY_OPS}
_BINARY_CALLS = {"max": "max", "min": "min", "pow": "pow"}


class ExprSyntaxError(ValueError):
    """Raised by :func:`parse` with the character offset of the problem."""

    def __init__(self, message: str, position: int, text: str = ""):
        super().__init__(f"{message} at position {position}")
        self.position = position
        self.text = text


class EvaluationError(Exception):
    pass


class UnboundVariableError(EvaluationError, KeyError):
    def __str__(self) -> str:
        return f"unbound variable: {self.args[0]!r}"


class GuardViolation(EvaluationError):
    """Evaluation produced a non-finite value or exceeded a guard limit."""


# ---------------------------------------------------------------------------
# tree


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Const:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"constant must be finite, got {self.value!r}")


@dataclass(frozen=True)
class Param:
    index: int

    def __post_init__(self):
        if not 0 <= self.index < MAX_NPARAMS:
            raise ValueError(f"parameter index out of range: {self.index}")


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expression"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op!r}")


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expression"
    right: "Expression"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op!r}")


Expression = Union[Var, Const, Param, Unary, Binary]


def children(node: Expression) -> tuple:
    if isinstance(node, Unary):
        return (node.child,)
    if isinstance(node, Binary):
        return (node.left, node.right)
    return ()


def walk(node: Expression):
    """Pre-order traversal."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(children(n)))


def length(node: Expression) -> int:
    return sum(1 for _ in walk(node))


def depth(node: Expression) -> int:
    kids = children(node)
    return 1 + (max(depth(k) for k in kids) if kids else 0)


def free_vars(node: Expression) -> frozenset:
    return frozenset(n.name for n in walk(node) if isinstance(n, Var))


def param_indices(node: Expression) -> list[int]:
    return sorted({n.index for n in walk(node) if isinstance(n, Param)})


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\*\*|[-+*/^(),])
    """,
    re.VERBOSE,
)
_PARAM_RE = re.compile(r"p(\d+)$")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if value == "**":
                value = "^"
            tokens.append((kind, value, pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self, offset: int = 0):
        return self.tokens[min(self.i + offset, len(self.tokens) - 1)]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok=None):
        tok = tok or self.peek()
        return ExprSyntaxError(message, tok[2], self.text)

    def expect(self, value: str):
        tok = self.next()
        if tok[1] != value or tok[0] not in ("op",):
            raise self.error(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok)
        return tok

    def parse(self) -> Expression:
        if self.peek()[0] == "end":
            raise self.error("empty expression")
        node = self.expr()
        if self.peek()[0] != "end":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self) -> Expression:
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = _FROM_INFIX[self.next()[1]]
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Expression:
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            op = _FROM_INFIX[self.next()[1]]
            node = Binary(op, node, self.unary())
        return node

    def unary(self) -> Expression:
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.next()
            nxt, after = self.peek(), self.peek(1)
            if nxt[0] == "num" and not (after[0] == "op" and after[1] == "^"):
                self.next()
                return Const(-self._number(nxt))
            return Unary("neg", self.unary())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.next()
            return Binary("pow", base, self.unary())
        return base

    def _number(self, tok) -> float:
        value = float(tok[1])
        if not math.isfinite(value):
            raise self.error(f"numeric literal out of range: {tok[1]}", tok)
        return value

    def atom(self) -> Expression:
        tok = self.next()
        kind, value, _ = tok
        if kind == "num":
            return Const(self._number(tok))
        if kind == "ident":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                return self.call(tok)
            m = _PARAM_RE.match(value)
            if m:
                index = int(m.group(1))
                if index >= MAX_NPARAMS:
                    raise self.error(f"parameter index out of range: {value}", tok)
                return Param(index)
            return Var(value)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise self.error(f"unexpected token {value or 'end of input'!r}", tok)

    def call(self, name_tok) -> Expression:
        name = name_tok[1]
        self.expect("(")
        args = [self.expr()]
        while self.peek()[0] == "op" and self.peek()[1] == ",":
            self.next()
            args.append(self.expr())
        self.expect(")")
        if name in _UNARY_CALLS:
            if len(args) != 1:
                raise self.error(f"{name}() takes 1 argument, got {len(args)}", name_tok)
            return Unary(_UNARY_CALLS[name], args[0])
        if name in _BINARY_CALLS:
            if len(args) != 2:
                raise self.error(f"{name}() takes 2 arguments, got {len(args)}", name_tok)
            return Binary(_BINARY_CALLS[name], args[0], args[1])
        raise self.error(f"unknown function {name!r}", name_tok)


def parse(text: str, max_nodes: int | None = DEFAULT_MAX_NODES) -> Expression:
    """Parse DSL text into an expression tree.

    Variables are not resolved here; any identifier that is not a parameter
    token or a function call becomes a :class:`Var`.
    """
    node = _Parser(text).parse()
    if max_nodes is not None:
        n = length(node)
        if n > max_nodes:
            raise ExprSyntaxError(f"expression has {n} nodes, limit is {max_nodes}", 0, text)
    return node


# ---------------------------------------------------------------------------
# printing

_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def _prec(node: Expression) -> int:
    if isinstance(node, Binary):
        return {"add": _PREC_ADD, "sub": _PREC_ADD, "mul": _PREC_MUL, "div": _PREC_MUL,
                "pow": _PREC_POW}.get(node.op, _PREC_ATOM)
    if isinstance(node, Unary) and node.op == "neg":
        return _PREC_NEG
    if isinstance(node, Const) and (node.value < 0 or math.copysign(1.0, node.value) < 0):
        return _PREC_NEG
    return _PREC_ATOM


def _wrap(node: Expression, needs_parens: bool) -> str:
    s = serialize(node)
    return f"({s})" if needs_parens else s


def serialize(node: Expression) -> str:
    """Canonical infix text; ``parse(serialize(e)) == e`` for every tree."""
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Param):
        return f"p{node.index}"
    if isinstance(node, Const):
        return _format_number(node.value)
    if isinstance(node, Unary):
        if node.op == "neg":
            child = node.child
            # a bare literal after '-' would fold into a negative constant
            parens = isinstance(child, Const) or _prec(child) < _PREC_NEG
            return "-" + _wrap(child, parens)
        return f"{node.op}({serialize(node.child)})"
    if node.op in ("max", "min"):
        return f"{node.op}({serialize(node.left)}, {serialize(node.right)})"
    p = _prec(node)
    if node.op == "pow":
        left = _wrap(node.left, _prec(node.left) < _PREC_ATOM)
        right = _wrap(node.right, _prec(node.right) < _PREC_NEG)
        return f"{left}^{right}"
    left = _wrap(node.left, _prec(node.left) < p)
    right = _wrap(node.right, _prec(node.right) <= p)
    sym = _INFIX[node.op]
    if p == _PREC_ADD:
        return f"{left} {sym} {right}"
    return f"{left}{sym}{right}"


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalGuard:
    max_nodes: int = DEFAULT_MAX_NODES
    timeout: float = 30.0
    nonfinite_policy: str = "reject"


DEFAULT_GUARD = EvalGuard()

_UNARY_FUNCS = {
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "step": lambda x: np.where(x >= 0, 1.0, 0.0),
}
_BINARY_FUNCS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "pow": np.power,
    "max": np.maximum,
    "min": np.minimum,
}


def _table_length(table: Mapping[str, np.ndarray]) -> int:
    lengths = {len(v) for v in table.values()}
    if len(lengths) > 1:
        raise ValueError(f"bound columns differ in length: {sorted(lengths)}")
    return lengths.pop() if lengths else 1


def evaluate(
    expr: Expression,
    table: Mapping[str, Sequence[float]],
    params: Sequence[float] = (),
    guard: EvalGuard = DEFAULT_GUARD,
) -> np.ndarray:
    """Evaluate ``expr`` elementwise over the bound columns.

    Raises :class:`UnboundVariableError` for a missing column and
    :class:`GuardViolation` when any intermediate value is non-finite, the
    tree is larger than ``guard.max_nodes`` or evaluation exceeds
    ``guard.timeout`` seconds.
    """
    n_nodes = length(expr)
    if n_nodes > guard.max_nodes:
        raise GuardViolation(f"expression has {n_nodes} nodes, limit is {guard.max_nodes}")
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
    n = _table_length(cols)
    for name in free_vars(expr):
        if name not in cols:
            raise UnboundVariableError(name)
        if not np.all(np.isfinite(cols[name])):
            raise GuardViolation(f"non-finite input in column {name!r}")
    p = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise GuardViolation("non-finite parameter value")
    deadline = time.monotonic() + guard.timeout

    def ev(node):
        if isinstance(node, Var):
            return cols[node.name]
        if isinstance(node, Const):
            return np.float64(node.value)
        if isinstance(node, Param):
            if node.index >= len(p):
                raise EvaluationError(f"no value supplied for parameter p{node.index}")
            return p[node.index]
        if time.monotonic() > deadline:
            raise GuardViolation("evaluation timed out")
        if isinstance(node, Unary):
            return _UNARY_FUNCS[node.op](ev(node.child))
        return _BINARY_FUNCS[node.op](ev(node.left), ev(node.right))

    try:
        with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
            out = ev(expr)
    except (FloatingPointError, ZeroDivisionError, OverflowError) as exc:
        raise GuardViolation(f"non-finite output ({exc})") from None
    out = np.broadcast_to(np.asarray(out, dtype=np.float64), (n,)).copy()
    if not np.all(np.isfinite(out)):
        raise GuardViolation("non-finite output")
    return out


def compile_expr(expr: Expression):
    """Return ``f(table, params) -> array`` built from nested closures.

    No guards are applied; callers wrap calls in ``np.errstate`` and check
    finiteness themselves. Used for inner loops such as ODE stepping and
    parameter fitting.
    """

    def build(node):
        if isinstance(node, Var):
            name = node.name
            return lambda tb, p: tb[name]
        if isinstance(node, Const):
            value = np.float64(node.value)
            return lambda tb, p: value
        if isinstance(node, Param):
            i = node.index
            return lambda tb, p: p[i]
        if isinstance(node, Unary):
            fn, child = _UNARY_FUNCS[node.op], build(node.child)
            return lambda tb, p: fn(child(tb, p))
        fn, left, right = _BINARY_FUNCS[node.op], build(node.left), build(node.right)
        return lambda tb, p: fn(left(tb, p), right(tb, p))

    return build(expr)


def evaluate_fast(fn, table: Mapping[str, np.ndarray], params: np.ndarray, n: int) -> np.ndarray:
    """Run a compiled expression with the same non-finite semantics as :func:`evaluate`."""
    try:
        with np.errstate(over="raise", divide="raise", invalid="raise", under="ignore"):
            out = fn(table, params)
    except (FloatingPointError, ZeroDivisionError, OverflowError) as exc:
        raise GuardViolation(f"non-finite output ({exc})") from None
    out = np.broadcast_to(np.asarray(out, dtype=np.float64), (n,))
    if not np.all(np.isfinite(out)):
        raise GuardViolation("non-finite output")
    return out
