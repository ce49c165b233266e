"""Random well-formed program generation for the testing harness.

Programs are generated directly as source components and compiled, so
validity holds by construction: exports are implemented, calls target
imports, ids are dense.  Termination is engineered structurally; calls
"forward" in a global procedure order are unrestricted, while calls
against the order (the ones that create reentrancy) are guarded by a
persistent counter cell, so every defined run is finite.

Each buffer-0 cell of a component gets a role: ``int`` cells are
initialized integers and only ever hold integers, ``ptr`` cells receive
allocation results inside self-contained statement templates, and ``junk``
cells stay uninitialized.  With undef_probability 0 all generated code
inspects int cells only, so runs never have undefined behavior; otherwise
each procedure may contain one potential undefined-behavior site drawn
from out-of-bounds accesses, integer dereference, uninitialized-value
inspection, bad allocation sizes, and cross-component leaks of pointers
or undefined values.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .compile import compile_program
from .machine import MachineProgram
from .source import (
    Alloc, Assign, BinOp, CallExpr, Deref, EXIT, Expr, If, IntLit, LOCAL,
    Seq, SourceComponent, SourceProgram, check_source, local_cell,
)
from .trace import ENV, Interface
from .values import TOP


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    component_count: tuple[int, int] = (2, 4)
    procedures_per_component: tuple[int, int] = (1, 3)
    body_depth: tuple[int, int] = (1, 3)
    undef_probability: float = 0.3
    buffer_cells: tuple[int, int] = (2, 5)
    tape_length: tuple[int, int] = (0, 6)

    def with_seed(self, seed: int) -> "GenConfig":
        return GenConfig(seed, self.component_count,
                         self.procedures_per_component, self.body_depth,
                         self.undef_probability, self.buffer_cells,
                         self.tape_length)


@dataclass
class _CompInfo:
    cid: int
    procs: list[str]
    exports: set[str]
    imports: set[tuple[int, str]] = field(default_factory=set)
    int_cells: list[int] = field(default_factory=list)
    ptr_cells: list[int] = field(default_factory=list)
    junk_cells: list[int] = field(default_factory=list)
    buffer0: list = field(default_factory=list)
    guard_cells: list[int] = field(default_factory=list)


class _Gen:
    def __init__(self, cfg: GenConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.comps: list[_CompInfo] = []
        self.rank: dict[tuple[int, str], int] = {}

    def _pick(self, lo_hi: tuple[int, int]) -> int:
        return self.rng.randint(*lo_hi)

    def build(self) -> SourceProgram:
        rng = self.rng
        n = self._pick(self.cfg.component_count)
        for cid in range(1, n + 1):
            k = self._pick(self.cfg.procedures_per_component)
            procs = (["main"] if cid == 1 else []) + [f"p{i}" for i in range(k)]
            info = _CompInfo(cid, procs, set())
            for p in procs:
                if p == "main":
                    if rng.random() < 0.4:
                        info.exports.add(p)
                elif rng.random() < 0.8:
                    info.exports.add(p)
            if cid != 1 and not info.exports:
                info.exports.add(procs[0])
            self.comps.append(info)
        for rank, key in enumerate(
                (c.cid, p) for c in self.comps for p in c.procs):
            self.rank[key] = rank

        # imports: any other component's exports plus the environment
        for info in self.comps:
            for other in self.comps:
                if other.cid == info.cid:
                    continue
                for p in sorted(other.exports):
                    if rng.random() < 0.45:
                        info.imports.add((other.cid, p))
            if rng.random() < 0.55:
                info.imports.add((ENV, "read"))
            if rng.random() < 0.45:
                info.imports.add((ENV, "write"))
        main_info = self.comps[0]
        if not any(d != ENV for d, _ in main_info.imports):
            candidates = [(c.cid, p) for c in self.comps[1:] for p in sorted(c.exports)]
            if candidates:
                main_info.imports.add(rng.choice(candidates))

        # buffer 0 with cell roles
        for info in self.comps:
            size = self._pick(self.cfg.buffer_cells)
            for i in range(size):
                role = rng.choices(("int", "ptr", "junk"), (0.6, 0.2, 0.2))[0]
                if role == "int":
                    info.int_cells.append(i)
                    info.buffer0.append(rng.randint(-4, 12))
                elif role == "ptr":
                    info.ptr_cells.append(i)
                    info.buffer0.append(TOP)
                else:
                    info.junk_cells.append(i)
                    info.buffer0.append(TOP)
            if not info.int_cells:
                info.int_cells.append(size)
                info.buffer0.append(0)
            # dedicated counter cells for reentrancy guards
            for _ in range(2):
                info.guard_cells.append(len(info.buffer0))
                info.int_cells.append(len(info.buffer0))
                info.buffer0.append(0)

        components = []
        for info in self.comps:
            procedures = {}
            for i, proc in enumerate(info.procs):
                procedures[proc] = self._body(info, i)
            iface = Interface(info.cid, frozenset(info.exports),
                              frozenset(info.imports))
            components.append(SourceComponent(
                iface, procedures, (tuple(info.buffer0),), f"C{info.cid}"))
        tape = tuple(rng.randint(-8, 99)
                     for _ in range(self._pick(self.cfg.tape_length)))
        program = SourceProgram(tuple(components), (1, "main"), tape)
        problems = check_source(program)
        if problems:
            raise AssertionError(f"generator produced an invalid program: {problems[0]}")
        return program

    # -- expressions ---------------------------------------------------------

    def _int_expr(self, info: _CompInfo, proc_index: int, depth: int) -> Expr:
        rng = self.rng
        if depth <= 0:
            if info.int_cells and rng.random() < 0.5:
                return Deref(local_cell(rng.choice(info.int_cells)))
            if rng.random() < 0.05:
                return IntLit(rng.randint(-(2 ** 62), 2 ** 62))
            return IntLit(rng.randint(-9, 20))
        roll = rng.random()
        if roll < 0.45:
            op = rng.choice(("+", "-", "*", "=", "<", "<="))
            return BinOp(op, self._int_expr(info, proc_index, depth - 1),
                         self._int_expr(info, proc_index, depth - 1))
        if roll < 0.6:
            return If(self._cond(info, proc_index, depth - 1),
                      self._int_expr(info, proc_index, depth - 1),
                      self._int_expr(info, proc_index, depth - 1))
        if roll < 0.75:
            call = self._call(info, proc_index, depth - 1)
            if call is not None:
                return call
        return self._int_expr(info, proc_index, 0)

    def _cond(self, info: _CompInfo, proc_index: int, depth: int) -> Expr:
        op = self.rng.choice(("=", "<", "<="))
        return BinOp(op, self._int_expr(info, proc_index, max(depth, 0)),
                     self._int_expr(info, proc_index, 0))

    def _call(self, info: _CompInfo, proc_index: int, depth: int) -> Expr | None:
        """A call (possibly guarded) whose value is an integer."""
        rng = self.rng
        targets = []
        me = self.rank[(info.cid, info.procs[proc_index])]
        for dst, proc in sorted(info.imports):
            targets.append((dst, proc))
        for j in range(proc_index + 1, len(info.procs)):
            targets.append((info.cid, info.procs[j]))  # forward internal call
        if not targets:
            return None
        dst, proc = rng.choice(targets)
        arg = self._int_expr(info, proc_index, min(depth, 1))
        call = CallExpr(dst, proc, arg)
        if dst == ENV or dst == info.cid:
            return call
        if self.rank.get((dst, proc), 1 << 30) > me:
            return call
        # call against the global order: bound it with a persistent counter
        guard = rng.choice(info.guard_cells)
        limit = rng.randint(1, 3)
        cell = local_cell(guard)
        return If(BinOp("<", Deref(cell), IntLit(limit)),
                  Seq(Assign(cell, BinOp("+", Deref(cell), IntLit(1))), call),
                  IntLit(0))

    # -- statements ----------------------------------------------------------

    def _statement(self, info: _CompInfo, proc_index: int, depth: int) -> Expr:
        rng = self.rng
        roll = rng.random()
        if roll < 0.3:
            call = self._call(info, proc_index, depth)
            if call is not None:
                return call
            roll = 0.5
        if roll < 0.55 and info.int_cells:
            cell = rng.choice(info.int_cells)
            return Assign(local_cell(cell), self._int_expr(info, proc_index, depth))
        if roll < 0.7 and info.ptr_cells:
            # self-contained allocation pattern: allocate, write, read back
            cell = local_cell(rng.choice(info.ptr_cells))
            size = rng.randint(1, 3)
            off = rng.randint(0, size - 1)
            slot = BinOp("+", Deref(cell), IntLit(off))
            pattern = Seq(Assign(cell, Alloc(IntLit(size))),
                          Assign(slot, self._int_expr(info, proc_index, 0)))
            if rng.random() < 0.5:
                pattern = Seq(pattern, Deref(BinOp("+", Deref(cell), IntLit(off))))
            return pattern
        if roll < 0.85:
            return If(self._cond(info, proc_index, depth),
                      self._statement(info, proc_index, max(depth - 1, 0)),
                      self._statement(info, proc_index, max(depth - 1, 0)))
        return self._int_expr(info, proc_index, depth)

    def _undef_site(self, info: _CompInfo, proc_index: int) -> Expr:
        rng = self.rng
        choices = ["deref_int", "store_int", "oob_store", "oob_store",
                   "oob_read", "bad_alloc"]
        if info.junk_cells:
            choices.append("inspect_junk")
            if info.imports:
                choices.append("top_cross")
        cross = [t for t in sorted(info.imports) if t[0] != ENV]
        if cross:
            choices += ["ptr_cross"]
        kind = rng.choice(choices)
        if kind == "deref_int":
            site: Expr = Deref(IntLit(rng.randint(0, 9)))
        elif kind == "store_int":
            site = Assign(IntLit(rng.randint(0, 60)), IntLit(rng.randint(1, 9)))
        elif kind == "oob_store":
            # overflow distances include whole and half power-of-two strides:
            # on flat targets some of these escape the buffer's own region
            # and smash neighbouring data (the compiled local stack, or
            # another compartment when nothing masks the write)
            stride = rng.choice((1 << 12, 1 << 13, 1 << 14, 1 << 15, 1 << 16,
                                 0, 0))
            if stride:
                off = (rng.choice((1, 2)) * stride
                       + rng.choice((0, 0, 1, 1, 2, 3, 4, rng.randint(5, 40))))
            else:
                off = len(info.buffer0) + rng.randint(0, 7000)
            site = Assign(local_cell(off), IntLit(rng.randint(1, 99)))
        elif kind == "oob_read":
            site = Deref(local_cell(len(info.buffer0) + rng.randint(0, 9)))
        elif kind == "bad_alloc":
            site = Alloc(IntLit(rng.choice((0, -1, -5))))
        elif kind == "inspect_junk":
            site = If(Deref(local_cell(rng.choice(info.junk_cells))),
                      IntLit(1), IntLit(2))
        elif kind == "top_cross":
            dst, proc = rng.choice(sorted(info.imports))
            site = CallExpr(dst, proc, Deref(local_cell(rng.choice(info.junk_cells))))
        else:  # ptr_cross
            dst, proc = rng.choice(cross)
            site = CallExpr(dst, proc, LOCAL)
        if rng.random() < 0.35 and info.guard_cells:
            # conditional site: fires only after enough visits
            cell = local_cell(rng.choice(info.guard_cells))
            return If(BinOp("<", IntLit(rng.randint(0, 2)), Deref(cell)),
                      site, IntLit(0))
        return site

    def _body(self, info: _CompInfo, proc_index: int) -> Expr:
        rng = self.rng
        depth = self._pick(self.cfg.body_depth)
        n_statements = rng.randint(1, 3)
        statements = []
        if info.procs[proc_index] == "main":
            call = self._call(info, proc_index, 1)
            if call is not None:
                statements.append(call)
        for _ in range(n_statements):
            statements.append(self._statement(info, proc_index, depth))
        if rng.random() < self.cfg.undef_probability:
            statements.insert(rng.randint(0, len(statements)),
                              self._undef_site(info, proc_index))
        if rng.random() < 0.05:
            statements.append(If(self._cond(info, proc_index, 0), EXIT, IntLit(0)))
        body = self._int_expr(info, proc_index, 0)
        for s in reversed(statements):
            body = Seq(s, body)
        return body


def gen_program(cfg: GenConfig) -> tuple[SourceProgram, MachineProgram]:
    """Deterministic in cfg (including the seed)."""
    source = _Gen(cfg).build()
    return source, compile_program(source)
