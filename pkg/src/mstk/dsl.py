"""Theory-file (.thy) parser and lowering.

A theory file declares the base dimension, fields, constants, opaque external
functions, named index ranges, abbreviations, the Lagrangian, symmetry
generators, declared primary constraints with their solved form, and inverse
Legendre bindings.  Parsing produces a syntactic document with source
positions; lowering expands all Einstein-summed index templates into concrete
engine objects (jet charts, scalars, vector fields, constraint sets).

Expression surface syntax:
    d(F[...], mu)   velocity coordinate of field F (or derivative of a
                    declared function parameter along its mu-th argument)
    p(F[...], mu)   multimomentum coordinate of field F
    det(NAME)       determinant of a two-slot abbreviation/constant/external
    inv(NAME)[i,j]  component of its matrix inverse
    sqrt(EXPR)      opaque square root
Repeated index letters in a product are summed over their declared range.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import sympy as sp

from .symcore import (
    AtomTable, IndexedFamily, einsum_expand, normalize,
    BASE, FIELD, VELOCITY, MOMENTUM, PARAMETER, EXTERNAL,
    MalformedContractionError, SymcoreError, _free_index_occurrences,
)
from .exterior import MultiVector, VectorField
from .jetgeom import (
    FieldDecl, BundleSpec, build_jet_chart, JetChart, LAGRANGIAN, HAMILTONIAN,
    lift_base_vector_to_E, prolong,
)
from .lagrangian import (ConstraintSet, cartan_forms, hessian_and_rank,
                         LagrangianSystem)
from .numcheck import SampleDomain

__all__ = ["parse_theory", "ParseError", "LoweringError", "Theory"]


class ParseError(Exception):
    def __init__(self, msg, line, col):
        super().__init__("%s (line %d, column %d)" % (msg, line, col))
        self.line = line
        self.col = col


class LoweringError(Exception):
    pass


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<num>\d+)
  | (?P<dots>\.\.)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_-]*)
  | (?P<op>[{}()\[\],;=+\-*/^<>])
""", re.VERBOSE)


@dataclass
class Token:
    kind: str   # 'num' | 'ident' | 'op' | 'dots' | 'eof'
    text: str
    line: int
    col: int


def _tokenize(text):
    out = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError("unexpected character %r" % text[pos], line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind != "ws":
            out.append(Token(kind, tok, line, col))
        nl = tok.count("\n")
        if nl:
            line += nl
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        pos = m.end()
    out.append(Token("eof", "", line, col))
    return out


# ---------------------------------------------------------------------------
# syntactic document
# ---------------------------------------------------------------------------

@dataclass
class RefNode:
    """A reference on the left-hand side of a binding: plain NAME[idx...],
    d(NAME[idx...], mu) or p(NAME[idx...], mu)."""
    op: str          # '' | 'd' | 'p'
    name: str
    indices: tuple   # str letters or ints


@dataclass
class SymmetryDecl:
    name: str
    kind: str        # base | config | gauge
    parameters: list = dc_field(default_factory=list)  # (name, ranges, of_what)
    components: list = dc_field(default_factory=list)  # (RefNode, template)


@dataclass
class TheoryDoc:
    name: str = ""
    m: int = 0
    index_ranges: dict = dc_field(default_factory=dict)
    constants: list = dc_field(default_factory=list)   # (name, ranges, sym, antisym, tablespec)
    externals: list = dc_field(default_factory=list)   # (name, ranges, sym, antisym, of_what)
    parameters: list = dc_field(default_factory=list)  # (name, ranges, of_what)
    assumptions: list = dc_field(default_factory=list) # (template, sign)
    fields: list = dc_field(default_factory=list)      # (name, internal ranges, (r,s))
    lets: list = dc_field(default_factory=list)        # (name, slot letters, template)
    lagrangian: tuple | None = None
    symmetries: list = dc_field(default_factory=list)
    primary: list = dc_field(default_factory=list)     # templates
    primary_solve: list = dc_field(default_factory=list)  # (RefNode, template)
    legendre_inverse: list = dc_field(default_factory=list)  # (RefNode, template)
    hamiltonian: tuple | None = None  # declared DDW Hamiltonian (momentum chart)


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    # --- token plumbing --------------------------------------------------
    def peek(self):
        return self.toks[self.i]

    def next(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def fail(self, msg, tok=None):
        tok = tok or self.peek()
        raise ParseError(msg, tok.line, tok.col)

    def expect(self, text):
        t = self.next()
        if t.text != text:
            self.fail("expected %r, found %r" % (text, t.text or "end of file"), t)
        return t

    def accept(self, text):
        if self.peek().text == text:
            return self.next()
        return None

    def ident(self):
        t = self.next()
        if t.kind != "ident":
            self.fail("expected a name, found %r" % t.text, t)
        return t.text

    def integer(self):
        neg = bool(self.accept("-"))
        t = self.next()
        if t.kind != "num":
            self.fail("expected an integer, found %r" % t.text, t)
        return -int(t.text) if neg else int(t.text)

    # --- top level -------------------------------------------------------
    def parse(self) -> TheoryDoc:
        doc = TheoryDoc()
        self.expect("theory")
        doc.name = self.ident()
        self.expect("{")
        while not self.accept("}"):
            self.statement(doc)
        if self.peek().kind != "eof":
            self.fail("trailing input after theory block")
        if doc.m == 0:
            raise ParseError("theory is missing 'base dim'", 1, 1)
        if doc.lagrangian is None:
            raise ParseError("theory is missing a lagrangian", 1, 1)
        return doc

    def statement(self, doc):
        t = self.peek()
        kw = t.text
        if kw == "base":
            self.next()
            self.expect("dim")
            doc.m = self.integer()
            self.expect(";")
        elif kw == "index":
            self.next()
            names = [self.ident()]
            while self.accept(","):
                names.append(self.ident())
            self.expect("in")
            lo = self.integer()
            self.expect("..")
            hi = self.integer()
            self.expect(";")
            for n in names:
                if n in doc.index_ranges:
                    self.fail("index %r declared twice" % n, t)
                doc.index_ranges[n] = (lo, hi)
        elif kw == "constant":
            self.next()
            name = self.ident()
            ranges = self.slot_ranges()
            sym, antisym = self.symmetry_mods()
            table = None
            if self.accept("="):
                table = self.table_spec(ranges)
            self.expect(";")
            doc.constants.append((name, ranges, sym, antisym, table))
        elif kw == "external":
            self.next()
            name = self.ident()
            ranges = self.slot_ranges()
            sym, antisym = self.symmetry_mods()
            self.expect("of")
            self.expect("(")
            of_what = self.ident()
            self.expect(")")
            self.expect(";")
            doc.externals.append((name, ranges, sym, antisym, of_what))
        elif kw == "parameter":
            self.next()
            doc.parameters.append(self.parameter_decl())
        elif kw == "assume":
            self.next()
            template = self.expr()
            op = self.next()
            if op.text not in ("<", ">"):
                self.fail("expected '<' or '>' in assumption", op)
            z = self.next()
            if z.text != "0":
                self.fail("assumptions compare against 0", z)
            self.expect(";")
            doc.assumptions.append((template, op.text))
        elif kw == "field":
            self.next()
            name = self.ident()
            internal, rs = [], (0, 0)
            if self.accept("["):
                internal, rs = self.field_slots()
            self.expect(";")
            doc.fields.append((name, internal, rs))
        elif kw == "let":
            self.next()
            name = self.ident()
            letters = []
            if self.accept("["):
                letters.append(self.ident())
                while self.accept(","):
                    letters.append(self.ident())
                self.expect("]")
            self.expect("=")
            template = self.expr()
            self.expect(";")
            doc.lets.append((name, letters, template))
        elif kw == "lagrangian":
            self.next()
            doc.lagrangian = self.expr()
            self.expect(";")
        elif kw == "symmetry":
            self.next()
            doc.symmetries.append(self.symmetry_block())
        elif kw == "constraints":
            self.next()
            self.expect("primary")
            self.expect("{")
            while not self.accept("}"):
                doc.primary.append(self.expr())
                self.expect(";")
            self.expect("with")
            self.expect("solve")
            self.expect("{")
            while not self.accept("}"):
                ref = self.ref_node()
                self.expect("=")
                doc.primary_solve.append((ref, self.expr()))
                self.expect(";")
        elif kw == "hamiltonian":
            # optional closed form for the De Donder-Weyl Hamiltonian; it is
            # only accepted after verification against the defining identity,
            # so it is a declared candidate, not an oracle
            self.next()
            doc.hamiltonian = self.expr()
            self.expect(";")
        elif kw == "legendre-inverse":
            self.next()
            self.expect("{")
            while not self.accept("}"):
                ref = self.ref_node()
                self.expect("=")
                doc.legendre_inverse.append((ref, self.expr()))
                self.expect(";")
        else:
            self.fail("unknown declaration %r" % kw, t)

    def parameter_decl(self):
        name = self.ident()
        ranges = []
        if self.peek().text == "[":
            ranges = self.slot_ranges()
        of_what = None
        if self.accept("of"):
            self.expect("(")
            of_what = self.ident()
            self.expect(")")
        self.expect(";")
        return (name, ranges, of_what)

    def slot_ranges(self):
        ranges = []
        if not self.accept("["):
            return ranges
        while True:
            lo = self.integer()
            self.expect("..")
            hi = self.integer()
            ranges.append((lo, hi))
            if not self.accept(","):
                break
        self.expect("]")
        return ranges

    def symmetry_mods(self):
        sym, antisym = [], []
        while self.peek().text in ("symmetric", "antisymmetric"):
            which = self.next().text
            self.expect("(")
            i = self.integer()
            self.expect(",")
            j = self.integer()
            self.expect(")")
            (sym if which == "symmetric" else antisym).append((i, j))
        return sym, antisym

    def table_spec(self, ranges):
        t = self.peek()
        if t.text == "diag":
            self.next()
            self.expect("(")
            entries = [self.number()]
            while self.accept(","):
                entries.append(self.number())
            self.expect(")")
            if len(ranges) != 2 or ranges[0] != ranges[1]:
                self.fail("diag needs two equal slot ranges", t)
            lo, hi = ranges[0]
            if len(entries) != hi - lo + 1:
                self.fail("diag has %d entries for range %d..%d"
                          % (len(entries), lo, hi), t)
            return {(lo + k, lo + k): v for k, v in enumerate(entries)}
        if t.text == "levicivita":
            self.next()
            n = len(ranges)
            if n < 2 or any(r != ranges[0] for r in ranges):
                self.fail("levicivita needs equal slot ranges", t)
            lo, hi = ranges[0]
            if hi - lo + 1 != n:
                self.fail("levicivita needs slot count equal to range size", t)
            table = {}
            for perm in itertools.permutations(range(lo, hi + 1)):
                table[perm] = _perm_sign(perm)
            return table
        self.fail("expected a table (diag(...) or levicivita)", t)

    def number(self):
        neg = bool(self.accept("-"))
        t = self.next()
        if t.kind != "num":
            self.fail("expected a number", t)
        val = Fraction(int(t.text))
        if self.accept("/"):
            d = self.next()
            if d.kind != "num":
                self.fail("expected a denominator", d)
            val /= int(d.text)
        return -val if neg else val

    def field_slots(self):
        """After '[': either an internal range, base-slot markers, or both
        separated by ';'.  Markers: up / down, one per base-tensor slot."""
        internal, r, s = [], 0, 0
        if self.peek().kind == "num" or self.peek().text == "-":
            while True:
                lo = self.integer()
                self.expect("..")
                hi = self.integer()
                internal.append((lo, hi))
                if not self.accept(","):
                    break
            if self.accept(";"):
                r, s = self.base_markers()
        else:
            r, s = self.base_markers()
        self.expect("]")
        return internal, (r, s)

    def base_markers(self):
        r = s = 0
        while self.peek().text in ("up", "down"):
            if self.next().text == "up":
                r += 1
            else:
                s += 1
        return r, s

    def symmetry_block(self):
        name = self.ident()
        self.expect("kind")
        paren = bool(self.accept("("))
        kind = self.ident()
        if paren:
            self.expect(")")
        if kind not in ("base", "config", "gauge"):
            self.fail("symmetry kind must be base, config or gauge")
        decl = SymmetryDecl(name, kind)
        self.expect("{")
        while not self.accept("}"):
            if self.peek().text == "parameter":
                self.next()
                decl.parameters.append(self.parameter_decl())
            elif self.peek().text == "component":
                self.next()
                ref = self.ref_node()
                self.expect("=")
                decl.components.append((ref, self.expr()))
                self.expect(";")
            else:
                self.fail("expected 'parameter' or 'component'")
        return decl

    def ref_node(self) -> RefNode:
        t = self.peek()
        if t.text in ("d", "p") and self.toks[self.i + 1].text == "(":
            op = self.next().text
            self.expect("(")
            name = self.ident()
            indices = self.index_list()
            self.expect(",")
            indices = indices + (self.index_item(),)
            self.expect(")")
            return RefNode(op, name, indices)
        name = self.ident()
        return RefNode("", name, self.index_list())

    def index_list(self):
        if not self.accept("["):
            return ()
        items = [self.index_item()]
        while self.accept(","):
            items.append(self.index_item())
        self.expect("]")
        return tuple(items)

    def index_item(self):
        t = self.next()
        if t.kind == "num":
            return int(t.text)
        if t.kind == "ident":
            return t.text
        self.fail("expected an index (name or integer)", t)

    # --- expressions -----------------------------------------------------
    def expr(self):
        t = self.term()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            rhs = self.term()
            rhs = rhs if op == "+" else ("neg", rhs)
            t = ("add", t, rhs) if t[0] != "add" else t + (rhs,)
        return t

    def term(self):
        t = self.factor()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            rhs = self.factor()
            if op == "/":
                if t[0] == "num" and rhs[0] == "num":
                    t = ("num", Fraction(t[1]) / Fraction(rhs[1]))
                    continue
                rhs = ("pow", rhs, -1)
            t = ("mul", t, rhs) if t[0] != "mul" else t + (rhs,)
        return t

    def factor(self):
        if self.accept("-"):
            return ("neg", self.factor())
        a = self.atom()
        if self.accept("^"):
            return ("pow", a, self.integer())
        return a

    def atom(self):
        t = self.peek()
        if t.kind == "num":
            self.next()
            return ("num", Fraction(int(t.text)))
        if t.text == "(":
            self.next()
            e = self.expr()
            self.expect(")")
            return e
        if t.kind != "ident":
            self.fail("expected an expression, found %r" % t.text, t)
        name = self.next().text
        if name == "sqrt":
            self.expect("(")
            e = self.expr()
            self.expect(")")
            return ("call", "sqrt", e)
        if name == "det":
            self.expect("(")
            inner = self.ident()
            self.expect(")")
            return ("ref", "det:" + inner, ())
        if name == "inv":
            self.expect("(")
            inner = self.ident()
            self.expect(")")
            idx = self.index_list()
            if len(idx) != 2:
                self.fail("inv(%s) needs two indices" % inner, t)
            return ("ref", "inv:" + inner, idx)
        if name in ("d", "p") and self.peek().text == "(":
            self.expect("(")
            inner = self.ident()
            indices = self.index_list()
            self.expect(",")
            indices = indices + (self.index_item(),)
            self.expect(")")
            return ("ref", name + ":" + inner, indices)
        return ("ref", name, self.index_list())


def _perm_sign(perm):
    sign = 1
    seen = [False] * len(perm)
    base = min(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, clen = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j] - base
            clen += 1
        if clen % 2 == 0:
            sign = -sign
    return sign


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------

@dataclass
class Symmetry:
    name: str
    kind: str
    X: MultiVector          # on the lagrangian jet chart
    natural: bool           # True when obtained by canonical lift/prolongation
    parameters: dict        # name -> symbol / tuple of symbols / functions


class Theory:
    """A lowered theory: charts, Lagrangian, symmetries, declared constraints
    and inverse-Legendre bindings, plus index-resolution helpers."""

    def __init__(self, doc: TheoryDoc):
        self.doc = doc
        self.name = doc.name
        self.m = doc.m
        self.ranges = dict(doc.index_ranges)
        self._matrix_cache = {}
        self._let_cache = {}
        self._build_charts()
        self._build_families()
        self.L = self._scalar(doc.lagrangian, LAGRANGIAN)
        self._system = None
        self.symmetries = {}
        for decl in doc.symmetries:
            self.symmetries[decl.name] = self._lower_symmetry(decl)

    # --- construction ----------------------------------------------------
    def _build_charts(self):
        doc = self.doc
        decls = []
        for (name, internal, rs) in doc.fields:
            decls.append(FieldDecl(name, internal=list(internal), tensor_type=rs))
        self.spec = BundleSpec(doc.m, decls)
        self.chart = build_jet_chart(self.spec, LAGRANGIAN)
        self.hchart = build_jet_chart(self.spec, HAMILTONIAN)
        self._field_decl = {d.name: d for d in decls}
        self._field_pos = {}
        for i, atom in enumerate(self.chart.fields):
            self._field_pos[(atom.name, atom.indices)] = i

    def _build_families(self):
        doc = self.doc
        t = self.spec.atoms
        self.constants = {}
        self.params = {}
        for (name, ranges, sym, antisym, table) in doc.constants:
            if not ranges and table is None:
                self.constants[name] = t.register(name, (), PARAMETER).sym
            else:
                if table is not None:
                    fam = IndexedFamily(name, ranges, table=table,
                                        symmetric=sym, antisymmetric=antisym)
                else:
                    fam = IndexedFamily(name, ranges, symmetric=sym,
                                        antisymmetric=antisym, atoms=t,
                                        kind=PARAMETER)
                self.constants[name] = fam
        self.externals = {}
        for (name, ranges, sym, antisym, of_what) in doc.externals:
            args = self._arg_coords(of_what)
            self.externals[name] = IndexedFamily(
                name, ranges, symmetric=sym, antisymmetric=antisym,
                atoms=t, kind=EXTERNAL, args=args)
            self.externals[name]._arg_of = of_what
        for p in doc.parameters:
            self._register_parameter(p, self.params)
        # side-free assumptions go onto the bundle spec so downstream numeric
        # domains pick them up automatically
        for (template, sign) in doc.assumptions:
            try:
                e = self._scalar_free(template)
            except LoweringError:
                continue
            self.spec.assumptions.append((e, sign))

    def _arg_coords(self, of_what):
        if of_what == "x":
            return tuple(a.sym for a in self.chart.base)
        if of_what in self._field_decl:
            return tuple(a.sym for a in self.chart.fields if a.name == of_what)
        raise LoweringError("unknown argument set %r (use 'x' or a field name)"
                            % of_what)

    def _register_parameter(self, p, into):
        (name, ranges, of_what) = p
        t = self.spec.atoms
        if of_what is None:
            if not ranges:
                into[name] = t.register(name, (), PARAMETER).sym
            else:
                into[name] = IndexedFamily(name, ranges, atoms=t, kind=PARAMETER)
        else:
            args = self._arg_coords(of_what)
            fam = IndexedFamily(name, ranges or [], atoms=t, kind=EXTERNAL,
                                args=args)
            fam._arg_of = of_what
            if not ranges:
                into[name] = fam()
            else:
                into[name] = fam
        self.params.setdefault(name, into[name])

    # --- resolution ------------------------------------------------------
    def _resolver(self, side, extra=None):
        extra = extra or {}

        def resolve(name, idx):
            if name in extra:
                return self._component(extra[name], idx, name)
            if name.startswith("d:"):
                return self._resolve_derivative(name[2:], idx, side, extra)
            if name.startswith("p:"):
                return self._resolve_momentum(name[2:], idx, side)
            if name.startswith("det:"):
                return self._det(name[4:], side)
            if name.startswith("inv:"):
                return self._inverse(name[4:], side, idx)
            if name == "x":
                if len(idx) != 1:
                    raise LoweringError("x takes one base index")
                return self._base_atom(idx[0]).sym
            if (name, idx) in self._field_pos:
                return self.chart.fields[self._field_pos[(name, idx)]].sym
            if name in self._field_decl:
                raise LoweringError("field %s used with indices %s" % (name, idx))
            for table in (self.constants, self.externals, self.params):
                if name in table:
                    return self._component(table[name], idx, name)
            hit = self._let(name, side)
            if hit is not None:
                return hit(idx)
            raise LoweringError("unknown name %r" % name)

        return resolve

    def _component(self, obj, idx, name):
        if isinstance(obj, IndexedFamily):
            return obj(*idx)
        if idx:
            raise LoweringError("%s takes no indices" % name)
        return obj

    def _base_atom(self, mu):
        if not isinstance(mu, int) or not (0 <= mu < self.m):
            raise LoweringError("base index %r out of range" % (mu,))
        return self.chart.base[mu]

    def _field_atom_index(self, name, idx):
        key = (name, tuple(idx))
        if key not in self._field_pos:
            raise LoweringError("no field component %s%s" % (name, list(idx)))
        return self._field_pos[key]

    def _resolve_derivative(self, name, idx, side, extra):
        if name in self._field_decl:
            if side != LAGRANGIAN:
                raise LoweringError(
                    "velocity d(%s,...) is not a hamiltonian-side coordinate" % name)
            i = self._field_atom_index(name, idx[:-1])
            return self.chart.vel(i, self._base_atom(idx[-1]).indices[0]).sym
        fam = self.params.get(name) or self.externals.get(name) or extra.get(name)
        if isinstance(fam, IndexedFamily) and fam.kind == EXTERNAL:
            val = fam(*idx[:-1])
            return sp.diff(val, self._deriv_arg(fam, idx[-1]))
        if fam is not None and not isinstance(fam, IndexedFamily):
            # slotless function parameter
            if len(idx) != 1:
                raise LoweringError("d(%s, mu) takes one derivative index" % name)
            owner = self.params.get(name)
            return sp.diff(fam, self._deriv_arg_expr(fam, idx[0]))
        raise LoweringError("cannot differentiate %r" % name)

    def _deriv_arg(self, fam, k):
        args = fam.args
        of = getattr(fam, "_arg_of", "x")
        if of == "x":
            return self._base_atom(k).sym
        lo = self._field_decl[of].internal[0][0] if self._field_decl[of].internal else 0
        j = k - lo
        if not (0 <= j < len(args)):
            raise LoweringError("derivative index %r out of range for %s"
                                % (k, fam.name))
        return args[j]

    def _deriv_arg_expr(self, applied, k):
        args = applied.args
        if not (0 <= k < len(args)):
            raise LoweringError("derivative index %r out of range" % (k,))
        return args[k]

    def _resolve_momentum(self, name, idx, side):
        if side != HAMILTONIAN:
            raise LoweringError(
                "momentum p(%s,...) is not a lagrangian-side coordinate" % name)
        i = self._field_atom_index(name, idx[:-1])
        return self.hchart.mom(i, self._base_atom(idx[-1]).indices[0]).sym

    def _let(self, name, side):
        for (lname, letters, template) in self.doc.lets:
            if lname != name:
                continue

            def value(idx, letters=letters, template=template):
                if len(idx) != len(letters):
                    raise LoweringError("%s expects %d indices" % (name, len(letters)))
                key = (name, side, tuple(idx))
                if key not in self._let_cache:
                    self._let_cache[key] = einsum_expand(
                        template, self.ranges, self._resolver(side),
                        binding=dict(zip(letters, idx)))
                return self._let_cache[key]

            return value
        return None

    def _let_slot_ranges(self, name):
        for (lname, letters, _template) in self.doc.lets:
            if lname == name:
                out = []
                for l in letters:
                    if l not in self.ranges:
                        raise LoweringError(
                            "slot %r of %s is not a declared index" % (l, name))
                    out.append(self.ranges[l])
                return out
        if name in self.constants and isinstance(self.constants[name], IndexedFamily):
            return self.constants[name].ranges
        if name in self.externals:
            return self.externals[name].ranges
        raise LoweringError("no two-slot object named %r" % name)

    def _det(self, name, side):
        key = ("det", name, side)
        if key not in self._matrix_cache:
            self._matrix_cache[key] = self._matrix(name, side).det()
        return self._matrix_cache[key]

    def _matrix(self, name, side):
        key = (name, side)
        if key not in self._matrix_cache:
            ranges = self._let_slot_ranges(name)
            if len(ranges) != 2 or ranges[0] != ranges[1]:
                raise LoweringError("det/inv need a square two-slot object (%s)"
                                    % name)
            lo, hi = ranges[0]
            res = self._resolver(side)
            M = sp.Matrix(hi - lo + 1, hi - lo + 1,
                          lambda i, j: res(name, (lo + int(i), lo + int(j))))
            self._matrix_cache[key] = M
        return self._matrix_cache[key]

    def _inverse(self, name, side, idx):
        key = ("inv", name, side)
        if key not in self._matrix_cache:
            M = self._matrix(name, side)
            self._matrix_cache[key] = M.adjugate().T / M.det()
        lo = self._let_slot_ranges(name)[0][0]
        i, j = idx
        return self._matrix_cache[key][i - lo, j - lo]

    # --- public lowering entry points ------------------------------------
    def _scalar(self, template, side, extra=None, binding=None):
        try:
            return einsum_expand(template, self.ranges,
                                 self._resolver(side, extra), binding=binding)
        except (MalformedContractionError, SymcoreError) as e:
            raise LoweringError(str(e))

    def _scalar_free(self, template):
        """Lower on whichever side resolves (assumptions may mention
        velocities or momenta, or neither)."""
        for side in (LAGRANGIAN, HAMILTONIAN):
            try:
                return self._scalar(template, side)
            except LoweringError:
                continue
        raise LoweringError("assumption does not resolve on either side")

    def resolve(self, name, *idx, side=LAGRANGIAN):
        """Value of any named object component (abbreviations included)."""
        return self._resolver(side)(name, tuple(idx))

    def assumption_exprs(self, side):
        out = []
        for (template, sign) in self.doc.assumptions:
            try:
                out.append((self._scalar(template, side), sign))
            except LoweringError:
                continue
        return out

    def domain(self, side, seed=42) -> SampleDomain:
        return SampleDomain(assumptions=self.assumption_exprs(side), seed=seed)

    def lagrangian_system(self) -> LagrangianSystem:
        if self._system is None:
            self._system = cartan_forms(self.L, self.chart)
            hessian_and_rank(self._system, domain=self.domain(LAGRANGIAN))
        return self._system

    # --- symmetries ------------------------------------------------------
    def _lower_symmetry(self, decl: SymmetryDecl) -> Symmetry:
        params = {}
        for p in decl.parameters:
            self._register_parameter(p, params)
        chart = self.chart
        comp = {}
        explicit_velocity = False
        for (ref, template) in decl.components:
            for atom, val in self._component_bindings(ref, template, params):
                if atom in comp:
                    raise LoweringError(
                        "component %s assigned twice in symmetry %s"
                        % (atom.label, decl.name))
                comp[atom] = val
                if atom.kind == VELOCITY:
                    explicit_velocity = True
        if decl.kind == "base":
            bad = [a for a in comp if a.kind != BASE]
            if bad:
                raise LoweringError(
                    "base symmetry %s has non-base component %s"
                    % (decl.name, bad[0].label))
            Z = lift_base_vector_to_E(
                {self.chart.base.index(a): c for a, c in comp.items()}, chart)
            X = prolong(Z)
            natural = True
        elif explicit_velocity:
            X = VectorField(chart, comp)
            natural = False
        else:
            X = prolong(VectorField(chart, comp))
            natural = True
        return Symmetry(decl.name, decl.kind, X, natural, params)

    def _component_bindings(self, ref: RefNode, template, params):
        """Expand a component statement over its free index letters, yielding
        (coordinate atom, expression) pairs."""
        letters = list(dict.fromkeys(i for i in ref.indices if isinstance(i, str)))
        for l in letters:
            if l not in self.ranges:
                raise LoweringError("index %r has no declared range" % l)
        spans = [range(self.ranges[l][0], self.ranges[l][1] + 1) for l in letters]
        for values in itertools.product(*spans):
            binding = dict(zip(letters, values))
            idx = tuple(binding[i] if isinstance(i, str) else i for i in ref.indices)
            atom = self._lhs_atom(ref, idx)
            val = self._scalar(template, LAGRANGIAN, extra=params, binding=binding)
            yield atom, val

    def _lhs_atom(self, ref: RefNode, idx):
        if ref.op == "d":
            i = self._field_atom_index(ref.name, idx[:-1])
            return self.chart.vel(i, self._base_atom(idx[-1]).indices[0])
        if ref.op == "p":
            i = self._field_atom_index(ref.name, idx[:-1])
            return self.hchart.mom(i, self._base_atom(idx[-1]).indices[0])
        if ref.name == "x":
            return self._base_atom(idx[0])
        key = (ref.name, tuple(idx))
        if key in self._field_pos:
            return self.chart.fields[self._field_pos[key]]
        raise LoweringError("left-hand side %s%s is not a coordinate"
                            % (ref.name, list(idx)))

    def symmetry(self, name) -> Symmetry:
        if name not in self.symmetries:
            raise LoweringError("no symmetry named %r (have: %s)"
                                % (name, ", ".join(sorted(self.symmetries))))
        return self.symmetries[name]

    # --- constraints and inverse bindings ---------------------------------
    def primary_constraints(self) -> ConstraintSet | None:
        doc = self.doc
        if not doc.primary:
            return None
        exprs = []
        for template in doc.primary:
            for e in self._expand_statement(template, HAMILTONIAN):
                if normalize(e) != 0:
                    exprs.append((normalize(e), "primary"))
        solved = {}
        for (ref, template) in doc.primary_solve:
            for atom, val in self._solve_bindings(ref, template, HAMILTONIAN):
                solved[atom] = val
        return ConstraintSet(self.hchart, exprs, solved)

    def declared_hamiltonian(self):
        if self.doc.hamiltonian is None:
            return None
        return self._scalar(self.doc.hamiltonian, HAMILTONIAN)

    def legendre_inverse_bindings(self):
        out = {}
        for (ref, template) in self.doc.legendre_inverse:
            for atom, val in self._solve_bindings(ref, template, HAMILTONIAN,
                                                  lhs_side=LAGRANGIAN):
                out[atom] = val
        return out

    def _expand_statement(self, template, side):
        counts = {}
        _free_index_occurrences(template, counts)
        letters = sorted(i for i, c in counts.items() if c == 1)
        for l in letters:
            if l not in self.ranges:
                raise LoweringError("index %r has no declared range" % l)
        spans = [range(self.ranges[l][0], self.ranges[l][1] + 1) for l in letters]
        for values in itertools.product(*spans):
            yield self._scalar(template, side, binding=dict(zip(letters, values)))

    def _solve_bindings(self, ref: RefNode, template, side, lhs_side=None):
        letters = list(dict.fromkeys(i for i in ref.indices if isinstance(i, str)))
        for l in letters:
            if l not in self.ranges:
                raise LoweringError("index %r has no declared range" % l)
        spans = [range(self.ranges[l][0], self.ranges[l][1] + 1) for l in letters]
        for values in itertools.product(*spans):
            binding = dict(zip(letters, values))
            idx = tuple(binding[i] if isinstance(i, str) else i for i in ref.indices)
            atom = self._lhs_atom_side(ref, idx, lhs_side or side)
            yield atom, self._scalar(template, side, binding=binding)

    def _lhs_atom_side(self, ref, idx, side):
        if ref.op == "d" and side == LAGRANGIAN:
            i = self._field_atom_index(ref.name, idx[:-1])
            return self.chart.vel(i, self._base_atom(idx[-1]).indices[0])
        if ref.op == "p" and side == HAMILTONIAN:
            i = self._field_atom_index(ref.name, idx[:-1])
            return self.hchart.mom(i, self._base_atom(idx[-1]).indices[0])
        return self._lhs_atom(ref, idx)


def parse_theory(text) -> Theory:
    """Parse and lower a .thy source string."""
    return Theory(_Parser(text).parse())
