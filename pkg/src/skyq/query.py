"""Query language: lexer, parser and planner.

Grammar (keywords are case-insensitive)::

    query      := select { ("UNION" | "INTERSECT" | "EXCEPT") select }
    select     := "SELECT" proj "FROM" ident ["WHERE" expr]
                  ["ORDER" "BY" term ["ASC" | "DESC"]] ["LIMIT" int]
    proj       := "TAG" | "FULL" | "COUNT" | ("MIN" | "MAX" | "AVG") "(" term ")"
                | term { "," term }
    expr       := and { "OR" and }
    and        := unary { "AND" unary }
    unary      := "NOT" unary | "(" expr ")" | spatial | comparison
    comparison := term ("<" | "<=" | ">" | ">=" | "=" | "!=") literal
    term       := ident [ "-" ident ]           e.g. r, g - r
    spatial    := "CIRCLE" "(" ra "," dec "," radius_arcsec ")"
                | "LATBAND" "(" frame "," lo_deg "," hi_deg ")"
                | "HALFSPACE" "(" nx "," ny "," nz "," d ")"

Set operations associate to the left and compare rows by ``obj_id``.
Magnitudes grow fainter upwards, so "brighter than r=22" is ``r < 22``.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

import numpy as np

from . import htm
from .sphere import (
    FRAMES,
    DomainError,
    HalfSpace,
    Region,
    cap,
    from_lonlat,
    as_region,
    latitude_band,
    region_intersection,
    region_union,
    to_lonlat,
    whole_sky,
)
from .store import CLASS_CODE, TAG_DTYPE, CatalogMeta, full_dtype

MAX_DISJUNCTS = 64


class QueryError(Exception):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.message = message
        self.line = line
        self.col = col
        prefix = f"{line}:{col}: " if line is not None else ""
        super().__init__(prefix + message)


class QuerySyntaxError(QueryError):
    pass


class PlanError(QueryError):
    pass


# --------------------------------------------------------------------------
# Lexer

KEYWORDS = {
    "SELECT", "FROM", "WHERE", "AND", "OR", "NOT", "ORDER", "BY", "ASC", "DESC",
    "LIMIT", "UNION", "INTERSECT", "EXCEPT", "TAG", "FULL", "COUNT", "MIN", "MAX", "AVG",
}  # fmt: skip
FUNCTIONS = {"CIRCLE", "LATBAND", "HALFSPACE"}
COMPARATORS = {"<", "<=", ">", ">=", "=", "!="}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|!=|<>|<|>|=)
  | (?P<punct>[(),\-])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # KEYWORD, IDENT, NUMBER, OP, PUNCT, EOF
    text: str
    line: int
    col: int

    def describe(self) -> str:
        return "end of input" if self.kind == "EOF" else repr(self.text)


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if not m:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        s = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "ident":
            up = s.upper()
            if up in KEYWORDS:
                tokens.append(Token("KEYWORD", up, line, col))
            else:
                tokens.append(Token("IDENT", s, line, col))
        elif kind == "number":
            tokens.append(Token("NUMBER", s, line, col))
        elif kind == "op":
            tokens.append(Token("OP", "!=" if s == "<>" else s, line, col))
        elif kind == "punct":
            tokens.append(Token("PUNCT", s, line, col))
        pos = m.end()
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


# --------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Attr:
    name: str
    pos: tuple[int, int] | None = field(default=None, compare=False, repr=False)

    def text(self) -> str:
        return self.name


@dataclass(frozen=True)
class Color:
    left: Attr
    right: Attr

    def text(self) -> str:
        return f"{self.left.name}-{self.right.name}"


Term = Union[Attr, Color]


@dataclass(frozen=True)
class Comparison:
    term: Term
    op: str
    value: Union[float, str]
    pos: tuple[int, int] | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Circle:
    ra: float
    dec: float
    radius_arcsec: float


@dataclass(frozen=True)
class LatBand:
    frame: str
    lo: float
    hi: float
    pos: tuple[int, int] | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class HalfSpaceAtom:
    nx: float
    ny: float
    nz: float
    d: float


SPATIAL_ATOMS = (Circle, LatBand, HalfSpaceAtom)


@dataclass(frozen=True)
class Not:
    operand: Any


@dataclass(frozen=True)
class And:
    operands: tuple


@dataclass(frozen=True)
class Or:
    operands: tuple


@dataclass(frozen=True)
class Projection:
    kind: str  # TAG, FULL, COUNT, MIN, MAX, AVG, ATTRS
    terms: tuple = ()


@dataclass(frozen=True)
class OrderBy:
    term: Term
    descending: bool = False


@dataclass(frozen=True)
class Select:
    projection: Projection
    catalog: str
    where: Any = None
    order_by: OrderBy | None = None
    limit: int | None = None


@dataclass(frozen=True)
class SetOp:
    op: str  # UNION, INTERSECT, EXCEPT
    left: Any
    right: Any


# --------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, text: str):
        self.tokens = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        t = self.tokens[self.i]
        if t.kind != "EOF":
            self.i += 1
        return t

    def error(self, expected: str):
        t = self.tok
        if t.kind == "EOF" and self.i > 0:
            prev = self.tokens[self.i - 1]
            raise QuerySyntaxError(
                f"unterminated expression after {prev.describe()}: expected {expected}",
                prev.line,
                prev.col,
            )
        raise QuerySyntaxError(f"expected {expected}, found {t.describe()}", t.line, t.col)

    def accept_kw(self, *words) -> Token | None:
        if self.tok.kind == "KEYWORD" and self.tok.text in words:
            return self.advance()
        return None

    def expect_kw(self, word: str) -> Token:
        t = self.accept_kw(word)
        if t is None:
            self.error(word)
        return t

    def accept_punct(self, p: str) -> Token | None:
        if self.tok.kind == "PUNCT" and self.tok.text == p:
            return self.advance()
        return None

    def expect_punct(self, p: str) -> Token:
        t = self.accept_punct(p)
        if t is None:
            self.error(repr(p))
        return t

    # -- grammar

    def query(self):
        node = self.select()
        while True:
            op = self.accept_kw("UNION", "INTERSECT", "EXCEPT")
            if op is None:
                break
            node = SetOp(op.text, node, self.select())
        if self.tok.kind != "EOF":
            self.error("end of query")
        return node

    def select(self) -> Select:
        self.expect_kw("SELECT")
        proj = self.projection()
        self.expect_kw("FROM")
        if self.tok.kind != "IDENT":
            self.error("catalog name")
        catalog = self.advance().text
        where = None
        if self.accept_kw("WHERE"):
            where = self.expr()
        order = None
        if self.accept_kw("ORDER"):
            self.expect_kw("BY")
            term = self.term()
            desc = False
            d = self.accept_kw("ASC", "DESC")
            if d is not None:
                desc = d.text == "DESC"
            order = OrderBy(term, desc)
        limit = None
        if self.accept_kw("LIMIT"):
            t = self.tok
            if t.kind != "NUMBER" or not t.text.isdigit():
                self.error("non-negative integer")
            limit = int(self.advance().text)
        return Select(proj, catalog, where, order, limit)

    def projection(self) -> Projection:
        t = self.accept_kw("TAG", "FULL", "COUNT")
        if t is not None:
            return Projection(t.text)
        t = self.accept_kw("MIN", "MAX", "AVG")
        if t is not None:
            self.expect_punct("(")
            term = self.term()
            self.expect_punct(")")
            return Projection(t.text, (term,))
        terms = [self.term()]
        while self.accept_punct(","):
            terms.append(self.term())
        return Projection("ATTRS", tuple(terms))

    def term(self) -> Term:
        t = self.tok
        if t.kind != "IDENT":
            self.error("attribute name")
        self.advance()
        left = Attr(t.text.lower(), (t.line, t.col))
        if self.accept_punct("-"):
            t2 = self.tok
            if t2.kind != "IDENT":
                self.error("attribute name")
            self.advance()
            return Color(left, Attr(t2.text.lower(), (t2.line, t2.col)))
        return left

    def expr(self):
        items = [self.and_expr()]
        while self.accept_kw("OR"):
            items.append(self.and_expr())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def and_expr(self):
        items = [self.unary()]
        while self.accept_kw("AND"):
            items.append(self.unary())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unary(self):
        if self.accept_kw("NOT"):
            return Not(self.unary())
        if self.accept_punct("("):
            e = self.expr()
            self.expect_punct(")")
            return e
        t = self.tok
        if t.kind == "IDENT" and self.tokens[self.i + 1].text == "(":
            return self.spatial()
        if t.kind != "IDENT":
            self.error("condition")
        return self.comparison()

    def number(self) -> float:
        neg = self.accept_punct("-") is not None
        t = self.tok
        if t.kind != "NUMBER":
            self.error("number")
        self.advance()
        v = float(t.text)
        return -v if neg else v

    def spatial(self):
        t = self.advance()
        name = t.text.upper()
        if name not in FUNCTIONS:
            raise QuerySyntaxError(f"unknown function {t.text!r}", t.line, t.col)
        self.expect_punct("(")
        if name == "LATBAND":
            f = self.tok
            if f.kind != "IDENT":
                self.error("frame name")
            self.advance()
            args = [f.text.upper()]
            for _ in range(2):
                self.expect_punct(",")
                args.append(self.number())
            self.expect_punct(")")
            return LatBand(args[0], args[1], args[2], (f.line, f.col))
        nargs = 3 if name == "CIRCLE" else 4
        args = [self.number()]
        for _ in range(nargs - 1):
            self.expect_punct(",")
            args.append(self.number())
        self.expect_punct(")")
        return Circle(*args) if name == "CIRCLE" else HalfSpaceAtom(*args)

    def comparison(self) -> Comparison:
        term = self.term()
        t = self.tok
        if t.kind != "OP":
            self.error("comparison operator")
        self.advance()
        v = self.tok
        if v.kind == "IDENT":
            self.advance()
            value: float | str = v.text.upper()
        else:
            value = self.number()
        return Comparison(term, t.text, value, (t.line, t.col))


def parse(text: str):
    """Parse query text into an AST (a :class:`Select` or :class:`SetOp`)."""
    return _Parser(text).query()


def parse_condition(text: str):
    """Parse a bare boolean condition such as ``class = QSO AND r < 22``."""
    p = _Parser(text)
    e = p.expr()
    if p.tok.kind != "EOF":
        p.error("end of condition")
    return e


# --------------------------------------------------------------------------
# Rendering


def _num(v: float) -> str:
    return repr(float(v))


def _term_text(t: Term) -> str:
    return t.name if isinstance(t, Attr) else f"{t.left.name} - {t.right.name}"


def render_expr(e) -> str:
    if isinstance(e, Comparison):
        v = e.value if isinstance(e.value, str) else _num(e.value)
        return f"{_term_text(e.term)} {e.op} {v}"
    if isinstance(e, Circle):
        return f"CIRCLE({_num(e.ra)}, {_num(e.dec)}, {_num(e.radius_arcsec)})"
    if isinstance(e, LatBand):
        return f"LATBAND({e.frame}, {_num(e.lo)}, {_num(e.hi)})"
    if isinstance(e, HalfSpaceAtom):
        return f"HALFSPACE({_num(e.nx)}, {_num(e.ny)}, {_num(e.nz)}, {_num(e.d)})"
    if isinstance(e, Not):
        return f"NOT {_wrap(e.operand)}"
    if isinstance(e, (And, Or)):
        sep = " AND " if isinstance(e, And) else " OR "
        return sep.join(_wrap(o) for o in e.operands)
    raise TypeError(f"not an expression: {e!r}")


def _wrap(e) -> str:
    s = render_expr(e)
    return f"({s})" if isinstance(e, (And, Or)) else s


def render(ast) -> str:
    """Render an AST back to query text that parses to an equal AST."""
    if isinstance(ast, SetOp):
        return f"{render(ast.left)} {ast.op} {render(ast.right)}"
    p = ast.projection
    if p.kind == "ATTRS":
        proj = ", ".join(_term_text(t) for t in p.terms)
    elif p.terms:
        proj = f"{p.kind}({_term_text(p.terms[0])})"
    else:
        proj = p.kind
    out = f"SELECT {proj} FROM {ast.catalog}"
    if ast.where is not None:
        out += f" WHERE {render_expr(ast.where)}"
    if ast.order_by is not None:
        out += f" ORDER BY {_term_text(ast.order_by.term)}"
        out += " DESC" if ast.order_by.descending else " ASC"
    if ast.limit is not None:
        out += f" LIMIT {ast.limit}"
    return out


def dump_ast(ast, indent: int = 0) -> str:
    """Stable, keyed, indented rendering for debugging."""
    pad = "  " * indent
    if dataclasses.is_dataclass(ast):
        lines = [f"{pad}{type(ast).__name__}"]
        for f in dataclasses.fields(ast):
            if f.name == "pos":
                continue
            v = getattr(ast, f.name)
            if dataclasses.is_dataclass(v) or (isinstance(v, tuple) and v):
                lines.append(f"{pad}  {f.name}:")
                lines.append(dump_ast(v, indent + 2))
            else:
                lines.append(f"{pad}  {f.name}: {v!r}")
        return "\n".join(lines)
    if isinstance(ast, tuple):
        return "\n".join(dump_ast(v, indent) for v in ast)
    return f"{pad}{ast!r}"


# --------------------------------------------------------------------------
# Expression evaluation


TAG_OUTPUT = tuple(n for n in TAG_DTYPE.names if n != "home_trixel")
DERIVED = {"ra", "dec"}


def term_values(term: Term, rec: np.ndarray) -> np.ndarray:
    if isinstance(term, Color):
        return term_values(term.left, rec) - term_values(term.right, rec)
    name = term.name
    if name in DERIVED:
        p = np.stack([rec["cx"], rec["cy"], rec["cz"]], axis=-1)
        lon, lat = to_lonlat(p) if len(rec) else (np.empty(0), np.empty(0))
        return np.asarray(lon if name == "ra" else lat, dtype=float).reshape(len(rec))
    return rec[name]


def spatial_region(atom, frames: Mapping | None = None) -> Region:
    """Convert one spatial atom to a region."""
    if isinstance(atom, Circle):
        return as_region(cap(from_lonlat(atom.ra, atom.dec), atom.radius_arcsec))
    if isinstance(atom, LatBand):
        frame = (FRAMES if frames is None else frames).get(atom.frame)
        if frame is None:
            raise DomainError(f"unknown frame {atom.frame!r}")
        return as_region(latitude_band(frame, atom.lo, atom.hi))
    if isinstance(atom, HalfSpaceAtom):
        return as_region(HalfSpace((atom.nx, atom.ny, atom.nz), atom.d))
    raise TypeError(f"not a spatial atom: {atom!r}")


def evaluate(expr, rec: np.ndarray, frames: Mapping | None = None) -> np.ndarray:
    """Vectorized truth value of ``expr`` for each record."""
    n = len(rec)
    if expr is None:
        return np.ones(n, dtype=bool)
    if isinstance(expr, Comparison):
        if isinstance(expr.value, str):
            lhs = rec["class"]
            rhs = CLASS_CODE[expr.value]
        else:
            lhs = term_values(expr.term, rec)
            rhs = expr.value
        op = expr.op
        if op == "<":
            return lhs < rhs
        if op == "<=":
            return lhs <= rhs
        if op == ">":
            return lhs > rhs
        if op == ">=":
            return lhs >= rhs
        if op == "=":
            return lhs == rhs
        return lhs != rhs
    if isinstance(expr, SPATIAL_ATOMS):
        p = np.stack([rec["cx"], rec["cy"], rec["cz"]], axis=-1).reshape(n, 3)
        return spatial_region(expr, frames).contains(p)
    if isinstance(expr, Not):
        return ~evaluate(expr.operand, rec, frames)
    if isinstance(expr, And):
        m = np.ones(n, dtype=bool)
        for o in expr.operands:
            m &= evaluate(o, rec, frames)
        return m
    if isinstance(expr, Or):
        m = np.zeros(n, dtype=bool)
        for o in expr.operands:
            m |= evaluate(o, rec, frames)
        return m
    raise TypeError(f"not an expression: {expr!r}")


def walk(expr):
    yield expr
    if isinstance(expr, Not):
        yield from walk(expr.operand)
    elif isinstance(expr, (And, Or)):
        for o in expr.operands:
            yield from walk(o)


def referenced_attrs(expr) -> list[Attr]:
    out = []
    for e in walk(expr) if expr is not None else ():
        if isinstance(e, Comparison):
            out.extend(_term_attrs(e.term))
    return out


def _term_attrs(t: Term) -> list[Attr]:
    return [t] if isinstance(t, Attr) else [t.left, t.right]


# --------------------------------------------------------------------------
# Plans


@dataclass(frozen=True, eq=False)
class ScanSpec:
    region: Region
    coverage: htm.Coverage
    residual: Any
    projection: str  # TAG or FULL
    estimate: tuple[int, float, int] | None = None


@dataclass(eq=False)
class QetNode:
    """A node of the query execution tree.

    SCAN nodes are leaves; set operations have two or more children and the
    unary operators exactly one.
    """

    kind: str  # SCAN UNION INTERSECT EXCEPT SORT LIMIT AGGREGATE PROJECT
    children: tuple = ()
    scan: ScanSpec | None = None
    sort: OrderBy | None = None
    limit: int | None = None
    aggregate: tuple[str, Term | None] | None = None
    columns: tuple = ()
    schema: tuple[str, ...] = ()

    def __post_init__(self):
        self.children = tuple(self.children)
        k, n = self.kind, len(self.children)
        if k == "SCAN" and n:
            raise PlanError("SCAN nodes are leaves")
        if k in ("UNION", "INTERSECT", "EXCEPT") and n < 2:
            raise PlanError(f"{k} needs at least two children")
        if k in ("SORT", "LIMIT", "AGGREGATE", "PROJECT") and n != 1:
            raise PlanError(f"{k} needs exactly one child")

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    @property
    def output_columns(self) -> tuple[str, ...]:
        if self.kind == "SCAN":
            dt = TAG_DTYPE if self.scan.projection == "TAG" else full_dtype(self.schema)
            return tuple(dt.names)
        if self.kind == "PROJECT":
            return tuple(column_name(t) for t in self.columns)
        if self.kind == "AGGREGATE":
            return (aggregate_name(*self.aggregate),)
        return self.children[0].output_columns


def column_name(t: Term) -> str:
    return t.text()


def aggregate_name(func: str, term: Term | None) -> str:
    return "count" if func == "COUNT" else f"{func.lower()}({term.text()})"


def _classify_expr(e) -> str:
    """'spatial', 'attr' or 'mixed' for one conjunct."""
    has_spatial = has_attr = negated_spatial = False

    def visit(x, under_not):
        nonlocal has_spatial, has_attr, negated_spatial
        if isinstance(x, SPATIAL_ATOMS):
            has_spatial = True
            negated_spatial |= under_not
        elif isinstance(x, Comparison):
            has_attr = True
        elif isinstance(x, Not):
            visit(x.operand, True)
        else:
            for o in x.operands:
                visit(o, under_not)

    visit(e, False)
    if negated_spatial or (has_spatial and has_attr):
        return "mixed"
    return "spatial" if has_spatial else "attr"


def _to_region(e, frames) -> Region:
    if isinstance(e, SPATIAL_ATOMS):
        return spatial_region(e, frames)
    if isinstance(e, Or):
        r = Region(())
        for o in e.operands:
            r = region_union(r, _to_region(o, frames))
            _check_dnf(r)
        return r
    r = whole_sky()
    for o in e.operands:
        r = region_intersection(r, _to_region(o, frames))
        _check_dnf(r)
    return r


def _check_dnf(r: Region):
    if len(r.convexes) > MAX_DISJUNCTS:
        raise PlanError(
            f"spatial condition expands to more than {MAX_DISJUNCTS} disjuncts; simplify the query"
        )


def split_where(where, frames=None) -> tuple[Region, Any]:
    """Separate the index-usable spatial part from the residual predicate."""
    if where is None:
        return whole_sky(), None
    conjuncts = list(where.operands) if isinstance(where, And) else [where]
    kinds = [_classify_expr(c) for c in conjuncts]
    if "mixed" in kinds:
        return whole_sky(), where
    region = whole_sky()
    for c, k in zip(conjuncts, kinds):
        if k == "spatial":
            region = region_intersection(region, _to_region(c, frames))
            _check_dnf(region)
    attrs = [c for c, k in zip(conjuncts, kinds) if k == "attr"]
    residual = None if not attrs else attrs[0] if len(attrs) == 1 else And(tuple(attrs))
    return region, residual


def _check_attrs(ast: Select, meta: CatalogMeta, frames=None) -> set[str]:
    known = set(TAG_OUTPUT) | DERIVED | set(meta.schema)
    used: list[Attr] = referenced_attrs(ast.where)
    for t in ast.projection.terms:
        used.extend(_term_attrs(t))
    if ast.order_by is not None:
        used.extend(_term_attrs(ast.order_by.term))
    for a in used:
        if a.name not in known:
            line, col = a.pos or (None, None)
            raise PlanError(f"unknown attribute {a.name!r}", line, col)
    for t in list(ast.projection.terms) + ([ast.order_by.term] if ast.order_by else []):
        if any(a.name == "class" for a in _term_attrs(t)) and (
            isinstance(t, Color) or ast.projection.kind in ("MIN", "MAX", "AVG")
        ):
            raise PlanError("class is not numeric", *(_term_attrs(t)[0].pos or (None, None)))
    for e in walk(ast.where) if ast.where is not None else ():
        if isinstance(e, Comparison):
            is_class = isinstance(e.term, Attr) and e.term.name == "class"
            line, col = e.pos or (None, None)
            if isinstance(e.term, Color) and "class" in (e.term.left.name, e.term.right.name):
                raise PlanError("type mismatch: class is not numeric", line, col)
            if is_class and not isinstance(e.value, str):
                raise PlanError("type mismatch: class compared to a number", line, col)
            if not is_class and isinstance(e.value, str):
                raise PlanError(f"type mismatch: numeric attribute compared to {e.value}", line, col)
            if is_class and e.value not in CLASS_CODE:
                raise PlanError(f"unknown class {e.value!r}", line, col)
            if is_class and e.op not in ("=", "!="):
                raise PlanError("class supports only = and !=", line, col)
        if isinstance(e, SPATIAL_ATOMS):
            try:
                spatial_region(e, frames)
            except DomainError as exc:
                line, col = getattr(e, "pos", None) or (None, None)
                raise PlanError(str(exc), line, col) from None
    return {a.name for a in used}


def plan(ast, meta: CatalogMeta, level: int | None = None, use_index: bool = True, frames=None):
    """Build the execution tree for a parsed query.

    ``level`` is the classification depth for coverages (default: two below
    the storage depth).  ``use_index=False`` forces whole-sky coverage with
    the full WHERE clause as the residual, which is the brute-force oracle.
    """
    if level is None:
        level = meta.storage_depth + 2
    if isinstance(ast, SetOp):
        left = plan(ast.left, meta, level, use_index, frames)
        right = plan(ast.right, meta, level, use_index, frames)
        for side in (left, right):
            if side.kind == "AGGREGATE":
                raise PlanError(f"{ast.op} operands cannot be aggregates")
            if "obj_id" not in side.output_columns:
                raise PlanError(f"{ast.op} operands must include obj_id")
        if left.output_columns != right.output_columns:
            raise PlanError(f"{ast.op} operands have different columns")
        kids = []
        for side in (left, right):
            if ast.op == "UNION" and side.kind == "UNION":
                kids.extend(side.children)
            else:
                kids.append(side)
        if ast.op != "UNION":
            kids = [left, right]
        return QetNode(ast.op, tuple(kids), schema=meta.schema)

    used = _check_attrs(ast, meta, frames)
    try:
        if use_index:
            region, residual = split_where(ast.where, frames)
        else:
            region, residual = whole_sky(), ast.where
    except DomainError as exc:
        raise PlanError(str(exc)) from None
    coverage = htm.classify(region, level)
    kind = ast.projection.kind
    tag_ok = used <= (set(TAG_OUTPUT) | DERIVED) and kind != "FULL"
    projection = "TAG" if tag_ok else "FULL"
    try:
        estimate = htm.estimate_selectivity(coverage, meta.counts)
    except DomainError:
        estimate = None
    node = QetNode(
        "SCAN",
        scan=ScanSpec(region, coverage, residual, projection, estimate),
        schema=meta.schema,
    )
    if ast.order_by is not None and kind not in ("COUNT", "MIN", "MAX", "AVG"):
        node = QetNode("SORT", (node,), sort=ast.order_by, schema=meta.schema)
    if ast.limit is not None:
        node = QetNode("LIMIT", (node,), limit=ast.limit, schema=meta.schema)
    if kind in ("COUNT", "MIN", "MAX", "AVG"):
        term = ast.projection.terms[0] if ast.projection.terms else None
        return QetNode("AGGREGATE", (node,), aggregate=(kind, term), schema=meta.schema)
    if kind == "TAG":
        cols = tuple(Attr(n) for n in TAG_OUTPUT)
        return QetNode("PROJECT", (node,), columns=cols, schema=meta.schema)
    if kind == "ATTRS":
        return QetNode("PROJECT", (node,), columns=ast.projection.terms, schema=meta.schema)
    return node


def explain(node: QetNode, indent: int = 0) -> str:
    """Render a plan tree, one node per line."""
    pad = "  " * indent
    if node.kind == "SCAN":
        s = node.scan
        cov = s.coverage
        est = "n/a" if s.estimate is None else (
            f"({s.estimate[0]},{s.estimate[1]:g},{s.estimate[2]})"
        )
        residual = "true" if s.residual is None else render_expr(s.residual)
        line = (
            f"{pad}SCAN projection={s.projection} level={cov.level} "
            f"full={len(cov.full)} partial={len(cov.partial)} "
            f"convexes={len(s.region.convexes)} estimate(min,expected,max)={est} residual={residual}"
        )
    elif node.kind == "SORT":
        line = f"{pad}SORT by={node.sort.term.text()} {'DESC' if node.sort.descending else 'ASC'}"
    elif node.kind == "LIMIT":
        line = f"{pad}LIMIT {node.limit}"
    elif node.kind == "AGGREGATE":
        line = f"{pad}AGGREGATE {aggregate_name(*node.aggregate)}"
    elif node.kind == "PROJECT":
        line = f"{pad}PROJECT {', '.join(node.output_columns)}"
    else:
        line = f"{pad}{node.kind}"
    return "\n".join([line] + [explain(c, indent + 1) for c in node.children])


def compile_query(text: str, meta: CatalogMeta, level=None, use_index=True) -> QetNode:
    return plan(parse(text), meta, level, use_index)
