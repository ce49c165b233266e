"""AST, well-formedness checking, linking, and printing of the source language.

A program is a set of components, each with an interface, a set of one-
argument procedures (the argument is not readable from the body; procedures
bind ``_``), and static buffers.  Buffer 0 of each component is the block
addressed by ``local``.  Component 0 is the implicit environment and never
has an implementation.
"""

from __future__ import annotations

import sys
import threading
from dataclasses import dataclass, field, replace

from .trace import ENV, ENV_EXPORTS, Interface, ProgramInterface, env_interface, interfaces_compatible
from .values import TOP, BINOPS


def deep_call(fn, *args):
    """Run fn in a thread with a large stack.

    Back-translated dispatchers nest one conditional per replayed event, so
    recursive tree walks (parsing, printing) need far more than the default
    recursion budget.
    """
    result: list = []
    error: list = []

    def runner():
        limit = sys.getrecursionlimit()
        try:
            sys.setrecursionlimit(1_000_000)
            result.append(fn(*args))
        except BaseException as exc:  # propagate to the caller
            error.append(exc)
        finally:
            sys.setrecursionlimit(limit)

    old_size = threading.stack_size(512 * 1024 * 1024)
    try:
        thread = threading.Thread(target=runner)
        thread.start()
        thread.join()
    finally:
        threading.stack_size(old_size)
    if error:
        raise error[0]
    return result[0]


# --- expressions (one class per production) --------------------------------


@dataclass(frozen=True, slots=True)
class IntLit:
    value: int


@dataclass(frozen=True, slots=True)
class Local:
    pass


@dataclass(frozen=True, slots=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True, slots=True)
class Seq:
    first: "Expr"
    second: "Expr"


@dataclass(frozen=True, slots=True)
class If:
    cond: "Expr"
    then: "Expr"
    els: "Expr"


@dataclass(frozen=True, slots=True)
class Alloc:
    size: "Expr"


@dataclass(frozen=True, slots=True)
class Deref:
    target: "Expr"


@dataclass(frozen=True, slots=True)
class Assign:
    target: "Expr"
    value: "Expr"


@dataclass(frozen=True, slots=True)
class CallExpr:
    comp: int
    proc: str
    arg: "Expr"


@dataclass(frozen=True, slots=True)
class Exit:
    pass


Expr = IntLit | Local | BinOp | Seq | If | Alloc | Deref | Assign | CallExpr | Exit

LOCAL = Local()
EXIT = Exit()


def local_cell(index: int) -> Expr:
    """Pointer expression for local[index]."""
    if index == 0:
        return LOCAL
    return BinOp("+", LOCAL, IntLit(index))


# --- components and programs -----------------------------------------------


@dataclass(frozen=True)
class SourceComponent:
    interface: Interface
    procedures: dict[str, Expr] = field(default_factory=dict)
    buffers: tuple[tuple[object, ...], ...] = ((TOP,),)
    name: str = ""

    @property
    def cid(self) -> int:
        return self.interface.component

    def display_name(self) -> str:
        return self.name or f"C{self.cid}"


@dataclass(frozen=True)
class SourceProgram:
    components: tuple[SourceComponent, ...]  # dense ids 1..n-1
    main: tuple[int, str]
    env_tape: tuple[int, ...] = ()

    def component(self, cid: int) -> SourceComponent:
        return self.components[cid - 1]

    def interface(self) -> ProgramInterface:
        ifaces = [env_interface()] + [c.interface for c in self.components]
        return ProgramInterface(tuple(ifaces), self.main)

    def names(self) -> list[str]:
        return ["E"] + [c.display_name() for c in self.components]

    def with_component(self, comp: SourceComponent) -> "SourceProgram":
        comps = list(self.components)
        comps[comp.cid - 1] = comp
        return replace(self, components=tuple(comps))

    def with_tape(self, tape) -> "SourceProgram":
        return replace(self, env_tape=tuple(tape))


# --- well-formedness --------------------------------------------------------


@dataclass(frozen=True)
class WellFormednessError(Exception):
    where: str
    message: str

    def __str__(self):
        return f"{self.where}: {self.message}"


def _check_expr(e: Expr, comp: SourceComponent, n_components: int, where: str, errors: list):
    stack = [e]
    while stack:
        node = stack.pop()
        t = type(node)
        if t is BinOp:
            if node.op not in BINOPS:
                errors.append(WellFormednessError(where, f"unknown operator {node.op!r}"))
            stack += [node.left, node.right]
        elif t is Seq:
            stack += [node.first, node.second]
        elif t is If:
            stack += [node.cond, node.then, node.els]
        elif t in (Alloc, Deref):
            stack.append(node.size if t is Alloc else node.target)
        elif t is Assign:
            stack += [node.target, node.value]
        elif t is CallExpr:
            if not (0 <= node.comp < n_components):
                errors.append(WellFormednessError(where, f"call to unknown component {node.comp}"))
            elif node.comp == comp.cid:
                if node.proc not in comp.procedures:
                    errors.append(WellFormednessError(
                        where, f"internal call to undefined procedure {node.proc!r}"))
            elif (node.comp, node.proc) not in comp.interface.imports:
                errors.append(WellFormednessError(
                    where, f"call to {node.comp}.{node.proc} which is not imported"))
            stack.append(node.arg)


def check_source(program: SourceProgram) -> list[WellFormednessError]:
    """Interface satisfaction, import discipline, main existence, dense ids."""
    errors: list[WellFormednessError] = []
    n = len(program.components) + 1
    for i, comp in enumerate(program.components, start=1):
        cname = comp.display_name()
        if comp.cid != i:
            errors.append(WellFormednessError(cname, f"component id {comp.cid} not dense"))
        for exported in sorted(comp.interface.exports):
            if exported not in comp.procedures:
                errors.append(WellFormednessError(
                    cname, f"exports {exported!r} but does not implement it"))
        if not comp.buffers:
            errors.append(WellFormednessError(cname, "component has no static buffer"))
        for proc, body in comp.procedures.items():
            _check_expr(body, comp, n, f"{cname}.{proc}", errors)
    ifaces = [env_interface()] + [c.interface for c in program.components]
    for problem in interfaces_compatible(ifaces):
        errors.append(WellFormednessError("interfaces", problem))
    mc, mp = program.main
    if not (0 < mc < n):
        errors.append(WellFormednessError("main", f"main component {mc} out of range"))
    elif mp not in program.component(mc).procedures:
        errors.append(WellFormednessError("main", f"{mp!r} not defined in component {mc}"))
    return errors


# --- linking ----------------------------------------------------------------


class LinkError(Exception):
    pass


class DuplicateComponent(LinkError):
    pass


class UnresolvedImport(LinkError):
    pass


def link_source(*groups, main: tuple[int, str] | None = None,
                env_tape: tuple[int, ...] = ()) -> SourceProgram:
    """Union of component sets; ids must be dense and imports resolvable."""
    comps: dict[int, SourceComponent] = {}
    for group in groups:
        for comp in group:
            if comp.cid in comps:
                raise DuplicateComponent(f"component id {comp.cid} defined twice")
            comps[comp.cid] = comp
    ordered = tuple(comps[i] for i in sorted(comps))
    ifaces = [env_interface()] + [c.interface for c in ordered]
    problems = interfaces_compatible(ifaces)
    if problems:
        raise UnresolvedImport("; ".join(problems))
    if main is None:
        mains = [(c.cid, "main") for c in ordered if "main" in c.procedures]
        if len(mains) != 1:
            raise LinkError(f"expected exactly one 'main' procedure, found {len(mains)}")
        main = mains[0]
    program = SourceProgram(ordered, main, tuple(env_tape))
    errors = check_source(program)
    if errors:
        raise UnresolvedImport("; ".join(str(e) for e in errors))
    return program


# --- pretty printer ---------------------------------------------------------

_PREC = {"=": 1, "<": 1, "<=": 1, "+": 2, "-": 2, "*": 3}


def _fmt_expr(e: Expr, names: list[str], prec: int = 0) -> str:
    t = type(e)
    if t is IntLit:
        return str(e.value)
    if t is Local:
        return "local"
    if t is Exit:
        return "exit"
    if t is BinOp:
        p = _PREC[e.op]
        op = "==" if e.op == "=" else e.op
        # comparisons are non-associative in the grammar: parenthesize
        # nested ones on both sides
        left_prec = p + 1 if p == 1 else p
        s = f"{_fmt_expr(e.left, names, left_prec)} {op} {_fmt_expr(e.right, names, p + 1)}"
        return f"({s})" if p < prec else s
    if t is Deref:
        return f"!{_fmt_expr(e.target, names, 9)}"
    if t is Alloc:
        return f"alloc {_fmt_expr(e.size, names, 9)}"
    if t is Assign:
        return f"({_fmt_expr(e.target, names, 0)} := {_fmt_expr(e.value, names, 0)})"
    if t is CallExpr:
        return f"{names[e.comp]}.{e.proc}({_fmt_expr(e.arg, names, 0)})"
    if t is Seq:
        return f"({_fmt_expr(e.first, names, 0)}; {_fmt_expr(e.second, names, 0)})"
    if t is If:
        return (f"if ({_fmt_expr(e.cond, names, 0)}) "
                f"{{ {_fmt_expr(e.then, names, 0)} }} else {{ {_fmt_expr(e.els, names, 0)} }}")
    raise TypeError(f"not an expression: {e!r}")


def _fmt_buffer(cells: tuple) -> str:
    if all(c is TOP for c in cells):
        return f"[{len(cells)}]"
    return "{" + ", ".join("?" if c is TOP else str(c) for c in cells) + "}"


def program_to_text(program: SourceProgram) -> str:
    """Concrete syntax for a program; parse_source inverts this."""
    return deep_call(_program_to_text, program)


def _program_to_text(program: SourceProgram) -> str:
    names = program.names()
    out = [f"main {names[program.main[0]]}.{program.main[1]};"]
    if program.env_tape:
        out.append("input " + ", ".join(map(str, program.env_tape)) + ";")
    out.append("")
    for comp in program.components:
        out.append(f"component {comp.display_name()} {{")
        imports = sorted(comp.interface.imports)
        if imports:
            out.append("  import " + ", ".join(f"{names[c]}.{p}" for c, p in imports) + ";")
        exports = sorted(comp.interface.exports)
        if exports:
            out.append("  export " + ", ".join(exports) + ";")
        out.append("  buffers " + ", ".join(_fmt_buffer(b) for b in comp.buffers) + ";")
        for proc in sorted(comp.procedures):
            body = _fmt_expr(comp.procedures[proc], names)
            out.append(f"  proc {proc}(_) {{ {body} }}")
        out.append("}")
        out.append("")
    return "\n".join(out)
