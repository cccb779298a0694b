"""
Coefficient Expressions
A small arithmetic language for a(x) and b(x): tokenizer, Pratt parser,
vectorised evaluation, canonical printer and numerical differentiation.

Grammar (no implicit multiplication):
    expr    := prefix (infix)*
    prefix  := NUMBER | 'x' | '-' expr | '+' expr | '(' expr ')' | FUNC '(' args ')'
    infix   := ('+' | '-' | '*' | '/' | '^') expr
'^' is right-associative and binds tighter than unary minus.
"""

import re
from dataclasses import dataclass
from typing import Callable, Iterator, List, Tuple, Union

import numpy as np

from src.errors import DomainError, ExprDomainError, ExprSyntaxError


FUNCTIONS = {
    'exp': 1, 'log': 1, 'sqrt': 1, 'sin': 1, 'cos': 1, 'abs': 1, 'pow': 2,
}

# binding powers
BP_ADD = 10
BP_MUL = 20
BP_UNARY = 30
BP_POW = 40

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),])
""", re.VERBOSE)

_START_OF_OPERAND = ('number', "'x'", 'function', "'('", "'-'", "'+'")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str = 'x'


@dataclass(frozen=True)
class Unary:
    op: str
    operand: 'Expr'


@dataclass(frozen=True)
class Binary:
    op: str
    left: 'Expr'
    right: 'Expr'


@dataclass(frozen=True)
class Call:
    func: str
    args: Tuple['Expr', ...]


Expr = Union[Num, Var, Unary, Binary, Call]


@dataclass(frozen=True)
class Token:
    kind: str     # 'num', 'name', 'op', 'end'
    text: str
    offset: int   # byte offset into the UTF-8 source


def tokenize(src: str) -> Iterator[Token]:
    """Split source text into tokens with byte offsets."""
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {src[pos]!r}",
                                  len(src[:pos].encode('utf-8')), _START_OF_OPERAND)
        kind = m.lastgroup
        if kind != 'ws':
            text = m.group()
            if text == '**':
                text = '^'
            yield Token(kind, text, len(src[:pos].encode('utf-8')))
        pos = m.end()
    yield Token('end', '', len(src.encode('utf-8')))


class _Parser:
    """Pratt parser over a token list."""

    def __init__(self, src: str):
        self.tokens: List[Token] = list(tokenize(src))
        self.pos = 0

    @property
    def token(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != 'end':
            self.pos += 1
        return tok

    def expect(self, text: str):
        tok = self.token
        if tok.text != text or tok.kind == 'end':
            self.fail(tok, (f"'{text}'",))
        self.advance()

    def fail(self, tok: Token, expected):
        found = 'end of input' if tok.kind == 'end' else repr(tok.text)
        raise ExprSyntaxError(f"unexpected {found}", tok.offset, expected)

    @staticmethod
    def lbp(tok: Token) -> int:
        if tok.kind != 'op':
            return 0
        return {'+': BP_ADD, '-': BP_ADD, '*': BP_MUL, '/': BP_MUL, '^': BP_POW}.get(tok.text, 0)

    def expression(self, rbp: int = 0) -> Expr:
        tok = self.advance()
        left = self.nud(tok)
        while rbp < self.lbp(self.token):
            tok = self.advance()
            left = self.led(tok, left)
        return left

    def nud(self, tok: Token) -> Expr:
        if tok.kind == 'num':
            value = float(tok.text)
            if not np.isfinite(value):
                raise ExprSyntaxError("number out of range", tok.offset, ('number',))
            return Num(value)
        if tok.kind == 'name':
            if tok.text == 'x':
                return Var()
            if tok.text in FUNCTIONS:
                return self.call(tok)
            raise ExprSyntaxError(f"unknown name {tok.text!r}", tok.offset, _START_OF_OPERAND)
        if tok.kind == 'op':
            if tok.text == '-':
                return Unary('-', self.expression(BP_UNARY))
            if tok.text == '+':
                return self.expression(BP_UNARY)
            if tok.text == '(':
                inner = self.expression()
                self.expect(')')
                return inner
        self.fail(tok, _START_OF_OPERAND)

    def led(self, tok: Token, left: Expr) -> Expr:
        if tok.text == '^':
            # right associative
            return Binary('^', left, self.expression(BP_POW - 1))
        return Binary(tok.text, left, self.expression(self.lbp(tok)))

    def call(self, tok: Token) -> Expr:
        arity = FUNCTIONS[tok.text]
        self.expect('(')
        args = [self.expression()]
        while self.token.text == ',' and self.token.kind == 'op':
            self.advance()
            args.append(self.expression())
        if self.token.text != ')' or self.token.kind == 'end':
            self.fail(self.token, ("')'", "','") if len(args) < arity else ("')'",))
        if len(args) != arity:
            raise ExprSyntaxError(
                f"{tok.text} takes {arity} argument(s), got {len(args)}",
                self.token.offset, ("')'",) if len(args) > arity else ("','",))
        self.advance()
        return Call(tok.text, tuple(args))


def parse(src: str) -> Expr:
    """
    Parse expression text into an AST.

    Args:
        src: Expression in the variable x

    Returns:
        Expression tree

    Raises:
        ExprSyntaxError: with the byte offset and the set of expected tokens
    """
    parser = _Parser(src)
    tree = parser.expression()
    if parser.token.kind != 'end':
        parser.fail(parser.token, ("operator", "end of input"))
    return tree


def to_text(e: Expr) -> str:
    """Canonical, fully parenthesised text of an expression."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return 'x'
    if isinstance(e, Unary):
        return f"(-{to_text(e.operand)})"
    if isinstance(e, Binary):
        return f"({to_text(e.left)} {e.op} {to_text(e.right)})"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(to_text(a) for a in e.args)})"
    raise TypeError(f"not an expression node: {e!r}")


def _fail(node: Expr, detail: str):
    raise ExprDomainError(to_text(node), detail)


def _evaluate(e: Expr, x: np.ndarray) -> np.ndarray:
    if isinstance(e, Num):
        return np.full_like(x, e.value)
    if isinstance(e, Var):
        return x
    if isinstance(e, Unary):
        return -_evaluate(e.operand, x)
    if isinstance(e, Binary):
        left = _evaluate(e.left, x)
        right = _evaluate(e.right, x)
        return _apply_binary(e, left, right)
    if isinstance(e, Call):
        args = [_evaluate(a, x) for a in e.args]
        return _apply_call(e, args)
    raise TypeError(f"not an expression node: {e!r}")


def _apply_binary(e: Binary, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    with np.errstate(all='ignore'):
        if e.op == '+':
            out = left + right
        elif e.op == '-':
            out = left - right
        elif e.op == '*':
            out = left * right
        elif e.op == '/':
            if np.any(right == 0):
                _fail(e, "division by zero")
            out = left / right
        else:
            out = _power(e, left, right)
    if not np.all(np.isfinite(out)):
        _fail(e, "non-finite result")
    return out


def _power(e: Expr, base: np.ndarray, exponent: np.ndarray) -> np.ndarray:
    integral = exponent == np.round(exponent)
    if np.any((base < 0) & ~integral):
        _fail(e, "negative base with non-integer exponent")
    if np.any((base == 0) & (exponent < 0)):
        _fail(e, "zero raised to a negative power")
    return np.power(base, exponent)


def _apply_call(e: Call, args: List[np.ndarray]) -> np.ndarray:
    a = args[0]
    with np.errstate(all='ignore'):
        if e.func == 'exp':
            out = np.exp(a)
        elif e.func == 'log':
            if np.any(a <= 0):
                _fail(e, "log of a non-positive number")
            out = np.log(a)
        elif e.func == 'sqrt':
            if np.any(a < 0):
                _fail(e, "sqrt of a negative number")
            out = np.sqrt(a)
        elif e.func == 'sin':
            out = np.sin(a)
        elif e.func == 'cos':
            out = np.cos(a)
        elif e.func == 'abs':
            out = np.abs(a)
        else:
            out = _power(e, a, args[1])
    if not np.all(np.isfinite(out)):
        _fail(e, "non-finite result")
    return out


def evaluate(e: Expr, x):
    """
    Evaluate an expression at x (scalar or array).

    Args:
        e: Parsed expression
        x: Point(s) of evaluation

    Returns:
        Value(s), float for scalar x

    Raises:
        ExprDomainError: naming the offending sub-expression
    """
    xa = np.asarray(x, dtype=float)
    out = _evaluate(e, np.atleast_1d(xa))
    return float(out[0]) if xa.ndim == 0 else out.reshape(xa.shape)


def compile_expr(e: Expr) -> Callable:
    """Wrap an expression as a vectorised callable x -> value."""
    def fn(x):
        return evaluate(e, x)
    fn.__doc__ = to_text(e)
    return fn


def default_step(x: float) -> float:
    """Central-difference step h = 1e-5 max(1, |x|)."""
    return 1e-5 * max(1.0, abs(x))


def diff_num(e: Expr, x: float, h: float = None) -> float:
    """
    Central difference (e(x+h) - e(x-h)) / (2h).

    Args:
        e: Parsed expression
        x: Point
        h: Step (default 1e-5 max(1, |x|))

    Returns:
        Derivative estimate
    """
    if h is None:
        h = default_step(x)
    if not h > 0:
        raise DomainError(f"step must be positive, got {h}")
    return (evaluate(e, x + h) - evaluate(e, x - h)) / (2.0 * h)
