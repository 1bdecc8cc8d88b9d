"""Parsing, differentiating, and inverting coordinate maps given as formulas.

Grammar (whitespace insensitive; offsets in error messages are 0-based):

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := ('-')? power
    power  := atom ('^' atom)?
    atom   := number | ident | ident '(' expr ')' | '(' expr ')' | 'pi'

Identifiers match [a-zA-Z_][a-zA-Z0-9_]*.  The function set is fixed: sin,
cos, tan, exp, log, sqrt, abs, tanh.  Exponents must be constants; integer
exponents are evaluated by repeated multiplication so negative bases are
fine, real exponents require a positive base.

Derivatives are exact forward mode: expressions compile once into closures
that are generic over a dual-number type (JetValue) carrying a value array
and a gradient block, so the same compiled code serves plain evaluation and
Jacobian assembly, scalar or batched.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import AmbientPoint, TWO_PI, wrap_angles, wrap_difference

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh")

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

NEWTON_TOL = 1e-12
NEWTON_MAX = 50
INVERSE_RESULT_TOL = 1e-10


class ParseError(ValueError):
    """Formula rejected; carries the 0-based byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class DomainError(RuntimeError):
    """A formula was evaluated outside its domain (log, sqrt, division...)."""

    def __init__(self, message: str, coordinate: int):
        super().__init__(message)
        self.coordinate = coordinate


class NoConvergence(RuntimeError):
    """Newton inversion failed to meet the residual tolerance."""

    def __init__(self, message: str, best_residual: float):
        super().__init__(message)
        self.best_residual = best_residual


class SingularJacobian(RuntimeError):
    """Newton inversion hit a singular linearization."""


# ---------------------------------------------------------------------------
# AST


class Expression:
    """Base class of formula AST nodes."""

    __slots__ = ()


@dataclass(frozen=True)
class Num(Expression):
    value: float
    lexeme: Optional[str] = field(default=None, compare=False)
    offset: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Name(Expression):
    ident: str
    offset: int = field(default=-1, compare=False)


@dataclass(frozen=True)
class Neg(Expression):
    operand: Expression


@dataclass(frozen=True)
class BinOp(Expression):
    op: str
    left: Expression
    right: Expression


@dataclass(frozen=True)
class Call(Expression):
    func: str
    arg: Expression


def _contains_name(expr: Expression) -> bool:
    if isinstance(expr, Name):
        return True
    if isinstance(expr, Neg):
        return _contains_name(expr.operand)
    if isinstance(expr, BinOp):
        return _contains_name(expr.left) or _contains_name(expr.right)
    if isinstance(expr, Call):
        return _contains_name(expr.arg)
    return False


def referenced_names(expr: Expression) -> frozenset[str]:
    """All identifiers (variables or parameters) appearing in a subtree."""
    if isinstance(expr, Name):
        return frozenset((expr.ident,))
    if isinstance(expr, Neg):
        return referenced_names(expr.operand)
    if isinstance(expr, BinOp):
        return referenced_names(expr.left) | referenced_names(expr.right)
    if isinstance(expr, Call):
        return referenced_names(expr.arg)
    return frozenset()


def eval_constant(expr: Expression) -> float:
    """Evaluate a name-free subtree to a plain float."""
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Neg):
        return -eval_constant(expr.operand)
    if isinstance(expr, BinOp):
        a, b = eval_constant(expr.left), eval_constant(expr.right)
        if expr.op == "+":
            return a + b
        if expr.op == "-":
            return a - b
        if expr.op == "*":
            return a * b
        if expr.op == "/":
            return a / b
        if expr.op == "^":
            return float(a) ** float(b)
    if isinstance(expr, Call):
        return float(_FUNCS[expr.func](eval_constant(expr.arg)))
    raise ValueError(f"not a constant expression: {expr!r}")


# ---------------------------------------------------------------------------
# Lexer / parser

_TOKEN_RE = re.compile(
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()])"
)


def _lex(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"syntax error: unexpected character {text[pos]!r}", pos)
        tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, names: frozenset[str]):
        self.text = text
        self.tokens = _lex(text)
        self.pos = 0
        self.names = names

    def _peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, "", len(self.text))

    def _take(self):
        tok = self._peek()
        self.pos += 1
        return tok

    def _expect_op(self, op: str):
        kind, text, offset = self._peek()
        if kind != "op" or text != op:
            raise ParseError(f"syntax error: expected {op!r}", offset)
        self.pos += 1

    def parse(self) -> Expression:
        e = self.expr()
        kind, text, offset = self._peek()
        if kind is not None:
            raise ParseError(f"syntax error: unexpected {text!r}", offset)
        return e

    def expr(self) -> Expression:
        e = self.term()
        while True:
            kind, text, _ = self._peek()
            if kind == "op" and text in "+-":
                self.pos += 1
                e = BinOp(text, e, self.term())
            else:
                return e

    def term(self) -> Expression:
        e = self.factor()
        while True:
            kind, text, _ = self._peek()
            if kind == "op" and text in "*/":
                self.pos += 1
                e = BinOp(text, e, self.factor())
            else:
                return e

    def factor(self) -> Expression:
        kind, text, _ = self._peek()
        if kind == "op" and text == "-":
            self.pos += 1
            return Neg(self.power())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        kind, text, offset = self._peek()
        if kind == "op" and text == "^":
            self.pos += 1
            exponent = self.atom()
            if _contains_name(exponent):
                raise ParseError("exponent must be a constant", offset)
            return BinOp("^", base, exponent)
        return base

    def atom(self) -> Expression:
        kind, text, offset = self._take()
        if kind == "num":
            return Num(float(text), lexeme=text, offset=offset)
        if kind == "ident":
            nxt_kind, nxt_text, _ = self._peek()
            if nxt_kind == "op" and nxt_text == "(":
                if text not in FUNCTIONS:
                    raise ParseError(f"unknown function {text!r}", offset)
                self.pos += 1
                arg = self.expr()
                self._expect_op(")")
                return Call(text, arg)
            if text == "pi":
                return Num(math.pi, lexeme="pi", offset=offset)
            if text not in self.names:
                raise ParseError(f"undeclared identifier {text!r}", offset)
            return Name(text, offset=offset)
        if kind == "op" and text == "(":
            e = self.expr()
            self._expect_op(")")
            return e
        raise ParseError("syntax error: expected a number, identifier, or '('", offset)


def parse_expression(text: str, names: Sequence[str]) -> Expression:
    """Parse a formula over the declared identifiers into an AST."""
    return _Parser(text, frozenset(names)).parse()


# ---------------------------------------------------------------------------
# Pretty printing

_PREC_ATOM = 100
_PREC_POW = 40
_PREC_NEG = 30
_PREC_MUL = 20
_PREC_ADD = 10


def _fmt_number(value: float) -> str:
    return format(value, ".17g")


def _render(expr: Expression) -> tuple[str, int]:
    if isinstance(expr, Num):
        text = expr.lexeme if expr.lexeme is not None else _fmt_number(expr.value)
        return text, (_PREC_NEG if text.startswith("-") else _PREC_ATOM)
    if isinstance(expr, Name):
        return expr.ident, _PREC_ATOM
    if isinstance(expr, Call):
        inner, _ = _render(expr.arg)
        return f"{expr.func}({inner})", _PREC_ATOM
    if isinstance(expr, Neg):
        inner, prec = _render(expr.operand)
        if prec < _PREC_POW:
            inner = f"({inner})"
        return f"-{inner}", _PREC_NEG
    if isinstance(expr, BinOp):
        if expr.op == "^":
            lt, lp = _render(expr.left)
            rt, rp = _render(expr.right)
            if lp < _PREC_ATOM:
                lt = f"({lt})"
            if rp < _PREC_ATOM:
                rt = f"({rt})"
            return f"{lt}^{rt}", _PREC_POW
        prec = _PREC_MUL if expr.op in "*/" else _PREC_ADD
        lt, lp = _render(expr.left)
        rt, rp = _render(expr.right)
        if lp < prec:
            lt = f"({lt})"
        if rp <= prec:
            rt = f"({rt})"
        joint = f"{lt} {expr.op} {rt}" if prec == _PREC_ADD else f"{lt}{expr.op}{rt}"
        return joint, prec
    raise TypeError(f"not an expression node: {expr!r}")


def to_source(expr: Expression) -> str:
    """Render an AST back to formula text with minimal parentheses."""
    return _render(expr)[0]


# ---------------------------------------------------------------------------
# Dual numbers

class JetValue:
    """Value plus gradient block for forward-mode differentiation.

    value has shape (...,) and grad shape (..., nvars); scalars mix in freely.
    """

    __slots__ = ("value", "grad")

    def __init__(self, value, grad):
        self.value = value
        self.grad = grad

    def __add__(self, other):
        if isinstance(other, JetValue):
            return JetValue(self.value + other.value, self.grad + other.grad)
        return JetValue(self.value + other, self.grad)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, JetValue):
            return JetValue(self.value - other.value, self.grad - other.grad)
        return JetValue(self.value - other, self.grad)

    def __rsub__(self, other):
        return JetValue(other - self.value, -self.grad)

    def __neg__(self):
        return JetValue(-self.value, -self.grad)

    def __mul__(self, other):
        if isinstance(other, JetValue):
            return JetValue(
                self.value * other.value,
                self.grad * _col(other.value) + other.grad * _col(self.value),
            )
        return JetValue(self.value * other, self.grad * _scal(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, JetValue):
            inv = 1.0 / other.value
            val = self.value * inv
            return JetValue(val, (self.grad - other.grad * _col(val)) * _col(inv))
        inv = 1.0 / other
        return JetValue(self.value * inv, self.grad * _scal(inv))

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        val = other * inv
        return JetValue(val, -self.grad * _col(val * inv))


def _col(x):
    """Append a broadcast axis when x is an array (value -> gradient shape)."""
    return x[..., None] if isinstance(x, np.ndarray) else x


def _scal(x):
    return x


def _jet_fn(value_fn, deriv_fn):
    def apply(x):
        if isinstance(x, JetValue):
            return JetValue(value_fn(x.value), x.grad * _col(deriv_fn(x.value)))
        return value_fn(x)
    return apply


_FUNCS: dict[str, Callable] = {
    "sin": _jet_fn(np.sin, np.cos),
    "cos": _jet_fn(np.cos, lambda v: -np.sin(v)),
    "tan": _jet_fn(np.tan, lambda v: 1.0 + np.tan(v) ** 2),
    "exp": _jet_fn(np.exp, np.exp),
    "log": _jet_fn(np.log, lambda v: 1.0 / v),
    "sqrt": _jet_fn(np.sqrt, lambda v: 0.5 / np.sqrt(v)),
    "abs": _jet_fn(np.abs, np.sign),
    "tanh": _jet_fn(np.tanh, lambda v: 1.0 / np.cosh(v) ** 2),
}


def _pow(base, exponent: float):
    k = round(exponent)
    integral = abs(exponent - k) <= 1e-12 * max(1.0, abs(exponent))
    if isinstance(base, JetValue):
        with np.errstate(all="ignore"):
            if integral:
                if k == 0:
                    return JetValue(np.ones_like(np.asarray(base.value, dtype=float)),
                                    base.grad * 0.0)
                val = np.power(base.value, float(k))
                dval = float(k) * np.power(base.value, float(k - 1))
            else:
                val = np.power(base.value, exponent)
                dval = exponent * np.power(base.value, exponent - 1.0)
        return JetValue(val, base.grad * _col(dval))
    with np.errstate(all="ignore"):
        return np.power(base, float(k) if integral else exponent)


# ---------------------------------------------------------------------------
# Compilation

def _compile(expr: Expression, var_index: dict[str, int], params: dict[str, float]) -> Callable:
    if isinstance(expr, Num):
        c = expr.value
        return lambda cols: c
    if isinstance(expr, Name):
        if expr.ident in var_index:
            j = var_index[expr.ident]
            return lambda cols: cols[j]
        c = params[expr.ident]
        return lambda cols: c
    if isinstance(expr, Neg):
        f = _compile(expr.operand, var_index, params)
        return lambda cols: -f(cols)
    if isinstance(expr, Call):
        f = _compile(expr.arg, var_index, params)
        fn = _FUNCS[expr.func]
        return lambda cols: fn(f(cols))
    if isinstance(expr, BinOp):
        if expr.op == "^":
            f = _compile(expr.left, var_index, params)
            e = eval_constant(expr.right)
            k = round(e)
            if abs(e - k) <= 1e-12 * max(1.0, abs(e)) and 2 <= k <= 4:
                # unrolled small integer powers keep dual-number cost low
                if k == 2:
                    return lambda cols: (lambda b: b * b)(f(cols))
                if k == 3:
                    return lambda cols: (lambda b: b * b * b)(f(cols))
                return lambda cols: (lambda b: (b * b) * (b * b))(f(cols))
            return lambda cols: _pow(f(cols), e)
        lf = _compile(expr.left, var_index, params)
        rf = _compile(expr.right, var_index, params)
        if expr.op == "+":
            return lambda cols: lf(cols) + rf(cols)
        if expr.op == "-":
            return lambda cols: lf(cols) - rf(cols)
        if expr.op == "*":
            return lambda cols: lf(cols) * rf(cols)
        if expr.op == "/":
            return lambda cols: lf(cols) / rf(cols)
    raise TypeError(f"not an expression node: {expr!r}")


# ---------------------------------------------------------------------------
# Map definitions

@dataclass(eq=False)
class MapDefinition:
    """A coordinate map given by one formula per coordinate.

    variables are ordered (base angles, stable offsets, unstable offsets) and
    double as coordinate names; periodic flags mark angular coordinates,
    which are reduced mod 2pi on output and compared with wraparound in
    Newton residuals.  Inverse formulas are optional; when absent the inverse
    is computed by Newton iteration on the forward map.
    """

    variables: tuple[str, ...]
    formulas: tuple[Expression, ...]
    params: dict[str, float]
    periodic: tuple[bool, ...]
    inverse_formulas: Optional[tuple[Expression, ...]] = None

    def __post_init__(self):
        m = len(self.variables)
        if len(set(self.variables)) != m:
            raise ParseError("duplicate variable name", 0)
        for v in self.variables:
            if v in self.params:
                raise ParseError(f"name {v!r} is both a variable and a parameter", 0)
        if len(self.formulas) != m:
            raise ValueError(f"{len(self.formulas)} formulas for {m} variables")
        if len(self.periodic) != m:
            raise ValueError(f"{len(self.periodic)} periodic flags for {m} variables")
        if self.inverse_formulas is not None and len(self.inverse_formulas) != m:
            raise ValueError(f"{len(self.inverse_formulas)} inverse formulas for {m} variables")
        self._fwd: Optional[list[Callable]] = None
        self._inv: Optional[list[Callable]] = None

    @classmethod
    def parse(cls,
              variables: Sequence[str],
              formulas: Sequence[str],
              params: Optional[dict[str, float]] = None,
              inverse: Optional[Sequence[str]] = None,
              periodic: Optional[Sequence[bool]] = None) -> "MapDefinition":
        params = dict(params or {})
        names = tuple(variables) + tuple(params)
        fwd = tuple(parse_expression(f, names) for f in formulas)
        inv = tuple(parse_expression(f, names) for f in inverse) if inverse is not None else None
        if periodic is None:
            periodic = (False,) * len(tuple(variables))
        return cls(tuple(variables), fwd, params, tuple(bool(p) for p in periodic), inv)

    @property
    def dim(self) -> int:
        return len(self.variables)

    def formula_sources(self) -> tuple[str, ...]:
        return tuple(to_source(f) for f in self.formulas)

    def inverse_sources(self) -> Optional[tuple[str, ...]]:
        if self.inverse_formulas is None:
            return None
        return tuple(to_source(f) for f in self.inverse_formulas)

    def compiled(self, inverse: bool = False) -> list[Callable]:
        if inverse:
            if self.inverse_formulas is None:
                raise ValueError("map has no registered inverse formulas")
            if self._inv is None:
                idx = {v: j for j, v in enumerate(self.variables)}
                self._inv = [_compile(f, idx, self.params) for f in self.inverse_formulas]
            return self._inv
        if self._fwd is None:
            idx = {v: j for j, v in enumerate(self.variables)}
            self._fwd = [_compile(f, idx, self.params) for f in self.formulas]
        return self._fwd

    def with_params(self, **updates: float) -> "MapDefinition":
        params = dict(self.params)
        params.update(updates)
        return MapDefinition(self.variables, self.formulas, params, self.periodic,
                             self.inverse_formulas)

    def periodic_array(self) -> np.ndarray:
        return np.asarray(self.periodic, dtype=bool)


def _eval_columns(fns: list[Callable], pts: np.ndarray) -> np.ndarray:
    n = pts.shape[0]
    cols = [pts[:, j] for j in range(pts.shape[1])]
    out = np.empty((n, len(fns)))
    with np.errstate(all="ignore"):
        for i, fn in enumerate(fns):
            out[:, i] = fn(cols)
    return out


def _check_finite(out: np.ndarray, what: str) -> None:
    if np.isfinite(out).all():
        return
    for i in range(out.shape[1]):
        if not np.isfinite(out[:, i]).all():
            bad = int(np.flatnonzero(~np.isfinite(out[:, i]))[0])
            raise DomainError(
                f"{what} for coordinate {i} left its domain at sample {bad}", i)


def map_eval_array(mapdef: MapDefinition, pts: np.ndarray, wrap: bool = True,
                   inverse: bool = False) -> np.ndarray:
    """Evaluate the map on an (N, m) batch of points."""
    pts = np.asarray(pts, dtype=float)
    out = _eval_columns(mapdef.compiled(inverse=inverse), pts)
    _check_finite(out, "inverse formula" if inverse else "formula")
    if wrap:
        for j, per in enumerate(mapdef.periodic):
            if per:
                out[:, j] = wrap_angles(out[:, j])
    return out


def map_eval_jacobian_array(mapdef: MapDefinition, pts: np.ndarray, wrap: bool = True,
                            inverse: bool = False, check: bool = True,
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate values and exact Jacobians on an (N, m) batch.

    Returns (values (N, m), jacobians (N, m, m)); J[p, i, j] = d out_i / d in_j.
    """
    pts = np.asarray(pts, dtype=float)
    n, m = pts.shape
    eye = np.eye(m)
    cols = [JetValue(pts[:, j], np.broadcast_to(eye[j], (n, m))) for j in range(m)]
    vals = np.empty((n, m))
    jac = np.empty((n, m, m))
    with np.errstate(all="ignore"):
        for i, fn in enumerate(mapdef.compiled(inverse=inverse)):
            out = fn(cols)
            if isinstance(out, JetValue):
                vals[:, i] = out.value
                jac[:, i, :] = out.grad
            else:
                vals[:, i] = out
                jac[:, i, :] = 0.0
    if check:
        _check_finite(vals, "formula")
        _check_finite(jac.reshape(n, m * m), "derivative of formula")
    if wrap:
        for j, per in enumerate(mapdef.periodic):
            if per:
                vals[:, j] = wrap_angles(vals[:, j])
    return vals, jac


def map_eval(mapdef: MapDefinition, point: AmbientPoint) -> AmbientPoint:
    """Evaluate the map at one point, preserving its base/fiber split."""
    vec = point.as_vector()
    out = map_eval_array(mapdef, vec[None, :])[0]
    nb, ns = point.base.size, point.xi_s.size
    return AmbientPoint(out[:nb], out[nb:nb + ns], out[nb + ns:])


def map_jacobian(mapdef: MapDefinition, point: AmbientPoint) -> np.ndarray:
    """Exact Jacobian matrix of the map at one point."""
    vec = point.as_vector()
    _, jac = map_eval_jacobian_array(mapdef, vec[None, :])
    return jac[0]


def residual_difference(mapdef: MapDefinition, achieved: np.ndarray,
                        target: np.ndarray) -> np.ndarray:
    """Coordinate difference achieved - target, wrapped on periodic axes."""
    diff = achieved - target
    per = mapdef.periodic_array()
    if per.any():
        diff[..., per] = wrap_difference(diff[..., per])
    return diff


def map_inverse_eval_array(mapdef: MapDefinition,
                           targets: np.ndarray,
                           guesses: np.ndarray,
                           newton_tol: float = NEWTON_TOL,
                           newton_max: int = NEWTON_MAX,
                           result_tol: float = INVERSE_RESULT_TOL,
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched preimages: solve map(p) = target for each row.

    Uses registered inverse formulas when present, Newton iteration on the
    forward map otherwise.  Returns (points, ok mask, residuals); rows that
    fail keep their best iterate with ok=False.
    """
    targets = np.asarray(targets, dtype=float)
    if mapdef.inverse_formulas is not None:
        pts = map_eval_array(mapdef, targets, inverse=True)
        res = np.abs(residual_difference(mapdef, map_eval_array(mapdef, pts, wrap=False),
                                         targets)).max(axis=1)
        return pts, res <= result_tol, res

    pts = np.array(guesses, dtype=float, copy=True)
    n = pts.shape[0]
    best = pts.copy()
    best_res = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    for _ in range(newton_max + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        vals, jac = map_eval_jacobian_array(mapdef, pts[idx], wrap=False, check=False)
        finite = np.isfinite(vals).all(axis=1) & np.isfinite(jac).all(axis=(1, 2))
        if not finite.all():
            active[idx[~finite]] = False  # diverged row: freeze at best iterate
            idx = idx[finite]
            if idx.size == 0:
                break
            vals, jac = vals[finite], jac[finite]
        res = residual_difference(mapdef, vals, targets[idx])
        res_norm = np.abs(res).max(axis=1)
        improved = res_norm < best_res[idx]
        best[idx[improved]] = pts[idx[improved]]
        best_res[idx[improved]] = res_norm[improved]
        converged = res_norm <= newton_tol
        active[idx[converged]] = False
        idx = idx[~converged]
        if idx.size == 0:
            break
        jac = jac[~converged]
        res = res[~converged]
        try:
            step = np.linalg.solve(jac, res[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.empty_like(res)
            for row in range(jac.shape[0]):
                try:
                    step[row] = np.linalg.solve(jac[row], res[row])
                except np.linalg.LinAlgError:
                    step[row] = 0.0
                    active[idx[row]] = False  # singular: freeze at best iterate
        pts[idx] -= step
    per = mapdef.periodic_array()
    if per.any():
        best[:, per] = wrap_angles(best[:, per])
    return best, best_res <= result_tol, best_res


def map_inverse_eval(mapdef: MapDefinition, target: AmbientPoint,
                     guess: Optional[AmbientPoint] = None,
                     newton_tol: float = NEWTON_TOL,
                     newton_max: int = NEWTON_MAX) -> AmbientPoint:
    """Preimage of one point; raises NoConvergence when the tolerance is unmet."""
    tvec = target.as_vector()
    gvec = tvec if guess is None else guess.as_vector()
    pts, ok, res = map_inverse_eval_array(mapdef, tvec[None, :], gvec[None, :],
                                          newton_tol=newton_tol, newton_max=newton_max)
    if not ok[0]:
        raise NoConvergence(
            f"inverse solve stalled with residual {res[0]:.3e} > {INVERSE_RESULT_TOL:.0e}",
            best_residual=float(res[0]))
    out = pts[0]
    nb, ns = target.base.size, target.xi_s.size
    return AmbientPoint(out[:nb], out[nb:nb + ns], out[nb + ns:])


def verify_inverse_roundtrip(mapdef: MapDefinition, model, npoints: int = 100,
                             tol: float = 1e-8, seed: int = 0) -> float:
    """Max round-trip error of registered inverse formulas on random interior points."""
    if mapdef.inverse_formulas is None:
        raise ValueError("map has no registered inverse formulas")
    rng = np.random.default_rng(seed)
    m = model.ambient_dim
    pts = np.empty((npoints, m))
    pts[:, model.sl_base] = rng.uniform(0.0, TWO_PI, (npoints, model.base_dim))
    for k, r in enumerate(model.radii_s):
        pts[:, model.base_dim + k] = rng.uniform(-0.9 * r, 0.9 * r, npoints)
    off = model.base_dim + model.stable_dim
    for k, r in enumerate(model.radii_u):
        pts[:, off + k] = rng.uniform(-0.9 * r, 0.9 * r, npoints)
    fwd = map_eval_array(mapdef, pts)
    back = map_eval_array(mapdef, fwd, inverse=True)
    err_b = np.abs(residual_difference(mapdef, back, pts)).max()
    inv = map_eval_array(mapdef, pts, inverse=True)
    there = map_eval_array(mapdef, inv)
    err_f = np.abs(residual_difference(mapdef, there, pts)).max()
    err = float(max(err_b, err_f))
    if err > tol:
        raise ValueError(f"inverse formulas fail round-trip: error {err:.3e} > {tol:.0e}")
    return err
