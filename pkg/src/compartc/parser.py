"""Concrete syntax for the source language.

C-flavored surface over the expression grammar::

    main MainC.mainP;

    component MainC {
      import C.p, E.read;
      export mainP;
      buffers {0}, [4];
      proc mainP(_) {
        if (local[0] == 0) { local[0]++; C.p(0); MainC.mainP(0) } else { exit }
      }
    }

``buffers {0}, [4]`` declares block 0 as one cell initialized to 0 and
block 1 as four uninitialized cells (``?`` marks a single uninitialized
cell inside ``{...}``).  Buffer 0 is the block addressed by ``local``.
``local[e]`` reads a cell, ``local[e] := v`` writes it, ``local[e]++``
increments it.  Calls may omit the argument (``C.p()`` passes 0).  ``E`` is
the reserved environment component.  If the ``main`` directive is omitted,
the unique procedure named ``main`` is the entry point.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .source import (
    Alloc, Assign, BinOp, CallExpr, Deref, EXIT, Expr, If, IntLit, LOCAL,
    Seq, SourceComponent, SourceProgram, WellFormednessError, check_source,
)
from .trace import ENV, Interface
from .values import TOP


@dataclass(frozen=True)
class ParseError(Exception):
    line: int
    col: int
    message: str

    def __str__(self):
        return f"{self.line}:{self.col}: {self.message}"


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|//[^\n]*)
  | (?P<num>-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>:=|\+\+|==|<=|[{}()\[\];,.<>!*+?=-])
    """,
    re.VERBOSE,
)

KEYWORDS = {"component", "import", "export", "buffers", "proc",
            "local", "exit", "alloc", "if", "else"}


@dataclass(frozen=True, slots=True)
class Token:
    kind: str  # num | ident | op | kw | eof
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, linestart = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(line, pos - linestart + 1, f"bad character {text[pos]!r}")
        if m.lastgroup == "ws":
            chunk = m.group()
            newlines = chunk.count("\n")
            if newlines:
                line += newlines
                linestart = m.start() + chunk.rfind("\n") + 1
        else:
            kind = m.lastgroup
            word = m.group()
            if kind == "ident" and word in KEYWORDS:
                kind = "kw"
            tokens.append(Token(kind, word, line, m.start() - linestart + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - linestart + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token], comp_ids: dict[str, int]):
        self.tokens = tokens
        self.pos = 0
        self.comp_ids = comp_ids

    @property
    def cur(self) -> Token:
        return self.tokens[self.pos]

    def error(self, message: str):
        raise ParseError(self.cur.line, self.cur.col, message)

    def advance(self) -> Token:
        tok = self.cur
        self.pos += 1
        return tok

    def accept(self, text: str) -> bool:
        if self.cur.text == text and self.cur.kind in ("op", "kw"):
            self.pos += 1
            return True
        return False

    def expect(self, text: str) -> Token:
        if not (self.cur.text == text and self.cur.kind in ("op", "kw")):
            self.error(f"expected {text!r}, found {self.cur.text!r}")
        return self.advance()

    def ident(self) -> str:
        if self.cur.kind != "ident":
            self.error(f"expected identifier, found {self.cur.text!r}")
        return self.advance().text

    def comp_ref(self, name: str) -> int:
        if name == "E":
            return ENV
        if name not in self.comp_ids:
            self.error(f"unknown component {name!r}")
        return self.comp_ids[name]

    # -- expressions --------------------------------------------------------

    def expr(self) -> Expr:
        first = self.assign()
        if self.accept(";"):
            if self.cur.text == "}":  # tolerate a trailing semicolon
                return first
            return Seq(first, self.expr())
        return first

    def assign(self) -> Expr:
        lhs = self.comparison()
        if self.accept(":="):
            return Assign(lhs, self.assign())
        return lhs

    def comparison(self) -> Expr:
        e = self.additive()
        for opname, astop in (("==", "="), ("<=", "<="), ("<", "<")):
            if self.accept(opname):
                return BinOp(astop, e, self.additive())
        return e

    def additive(self) -> Expr:
        e = self.multiplicative()
        while True:
            if self.accept("+"):
                e = BinOp("+", e, self.multiplicative())
            elif self.accept("-"):
                e = BinOp("-", e, self.multiplicative())
            else:
                return e

    def multiplicative(self) -> Expr:
        e = self.unary()
        while self.accept("*"):
            e = BinOp("*", e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.accept("!"):
            return Deref(self.unary())
        return self.postfix()

    def postfix(self) -> Expr:
        e = self.primary()
        while self.cur.text == "[" and self.cur.kind == "op":
            self.advance()
            index = self.expr()
            self.expect("]")
            place = e if _is_zero(index) else BinOp("+", e, index)
            if self.accept("++"):
                return Assign(place, BinOp("+", Deref(place), IntLit(1)))
            if self.accept(":="):
                return Assign(place, self.assign())
            e = Deref(place)
        return e

    def primary(self) -> Expr:
        tok = self.cur
        if tok.kind == "num":
            self.advance()
            return IntLit(int(tok.text))
        if tok.text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if tok.text == "local":
            self.advance()
            return LOCAL
        if tok.text == "exit":
            self.advance()
            if self.accept("("):
                self.expect(")")
            return EXIT
        if tok.text == "alloc":
            self.advance()
            return Alloc(self.unary())
        if tok.text == "if":
            self.advance()
            self.expect("(")
            cond = self.expr()
            self.expect(")")
            self.expect("{")
            then = self.expr()
            self.expect("}")
            els: Expr = IntLit(0)
            if self.accept("else"):
                self.expect("{")
                els = self.expr()
                self.expect("}")
            return If(cond, then, els)
        if tok.kind == "ident":
            name = self.advance().text
            self.expect(".")
            proc = self.ident()
            self.expect("(")
            arg: Expr = IntLit(0)
            if self.cur.text != ")":
                arg = self.expr()
            self.expect(")")
            return CallExpr(self.comp_ref(name), proc, arg)
        self.error(f"expected expression, found {tok.text!r}")

    # -- declarations -------------------------------------------------------

    def buffer(self) -> tuple:
        if self.accept("["):
            tok = self.cur
            if tok.kind != "num" or int(tok.text) <= 0:
                self.error("buffer size must be a positive integer")
            self.advance()
            self.expect("]")
            return (TOP,) * int(tok.text)
        self.expect("{")
        cells = []
        while True:
            if self.accept("?"):
                cells.append(TOP)
            elif self.cur.kind == "num":
                cells.append(int(self.advance().text))
            else:
                self.error("expected buffer cell (integer or ?)")
            if not self.accept(","):
                break
        self.expect("}")
        return tuple(cells)

    def component(self) -> SourceComponent:
        self.expect("component")
        name = self.ident()
        cid = self.comp_ids[name]
        self.expect("{")
        imports: set[tuple[int, str]] = set()
        exports: set[str] = set()
        buffers: list[tuple] = []
        procedures: dict[str, Expr] = {}
        while not self.accept("}"):
            if self.accept("import"):
                while True:
                    target = self.ident()
                    self.expect(".")
                    proc = self.ident()
                    imports.add((self.comp_ref(target), proc))
                    if not self.accept(","):
                        break
                self.expect(";")
            elif self.accept("export"):
                while True:
                    exports.add(self.ident())
                    if not self.accept(","):
                        break
                self.expect(";")
            elif self.accept("buffers"):
                while True:
                    buffers.append(self.buffer())
                    if not self.accept(","):
                        break
                self.expect(";")
            elif self.accept("proc"):
                proc = self.ident()
                self.expect("(")
                if self.cur.text == "_":
                    self.advance()
                self.expect(")")
                self.expect("{")
                body = self.expr()
                self.expect("}")
                if proc in procedures:
                    self.error(f"procedure {proc!r} defined twice")
                procedures[proc] = body
            else:
                self.error(f"expected component clause, found {self.cur.text!r}")
        iface = Interface(cid, frozenset(exports), frozenset(imports))
        return SourceComponent(iface, procedures, tuple(buffers) or ((TOP,),), name)


def _is_zero(e: Expr) -> bool:
    return type(e) is IntLit and e.value == 0


def parse_source(text: str) -> SourceProgram:
    """Parse a whole program; raises ParseError or WellFormednessError."""
    from .source import deep_call

    return deep_call(_parse_source, text)


def _parse_source(text: str) -> SourceProgram:
    tokens = _tokenize(text)
    comp_ids: dict[str, int] = {}
    for i, tok in enumerate(tokens):  # pre-scan declarations for name resolution
        if tok.text == "component" and tokens[i + 1].kind == "ident":
            name = tokens[i + 1].text
            if name == "E":
                raise ParseError(tok.line, tok.col, "component name E is reserved")
            if name in comp_ids:
                raise ParseError(tok.line, tok.col, f"component {name!r} defined twice")
            comp_ids[name] = len(comp_ids) + 1

    parser = _Parser(tokens, comp_ids)
    main: tuple[int, str] | None = None
    if parser.cur.kind == "ident" and parser.cur.text == "main":
        parser.advance()
        name = parser.ident()
        parser.expect(".")
        proc = parser.ident()
        parser.expect(";")
        main = (parser.comp_ref(name), proc)

    env_tape: list[int] = []
    if parser.cur.kind == "ident" and parser.cur.text == "input":
        parser.advance()
        while parser.cur.kind == "num":
            env_tape.append(int(parser.advance().text))
            if not parser.accept(","):
                break
        parser.expect(";")

    components = []
    while parser.cur.kind != "eof":
        components.append(parser.component())
    components.sort(key=lambda c: c.cid)

    if main is None:
        mains = [(c.cid, "main") for c in components if "main" in c.procedures]
        if len(mains) != 1:
            raise ParseError(1, 1, f"expected exactly one 'main' procedure, found {len(mains)}")
        main = mains[0]

    program = SourceProgram(tuple(components), main, tuple(env_tape))
    errors = check_source(program)
    if errors:
        raise errors[0]
    return program
