"""Separate compilation of source components to machine components.

Calling convention: the single argument travels in R_COM and the result
comes back in R_COM for cross-component calls; expression results live in
R_AUX1.  Each component gets one growable data block as its local stack,
addressed through R_SP, with cell 0 of that block holding the live
stack-top pointer so R_SP can be rebuilt after cross-component calls wipe
the registers.  Exported procedures get an external entry wrapper that
saves the incoming return address, runs the shared body, and executes
Return; internal calls Jal straight to the body and return by jumping
through the saved return address.  R_ONE is kept equal to 1 at every
point where compiled code can resume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .machine import (
    AllocInstr, BinOpInstr, Bnz, Call, Const, DataLabel, Halt, Instr, Jal,
    Jump, Load, MachineComponent, MachineProgram, Mov, Nop, R_AUX1, R_AUX2,
    R_COM, R_ONE, R_RA, R_SP, Return, Store, link_machine,
)
from . import source as S
from .source import SourceComponent, SourceProgram
from .values import TOP, Ptr


@dataclass
class _Emitter:
    stack_block: int
    code: list[Instr] = field(default_factory=list)
    labels: dict[str, tuple[int, int]] = field(default_factory=dict)
    code_block: int = 0
    counter: int = 0

    def emit(self, *instrs: Instr):
        self.code.extend(instrs)

    def here(self, label: str):
        self.labels[label] = (self.code_block, len(self.code))

    def fresh(self, base: str) -> str:
        self.counter += 1
        return f"{base}{self.counter}"

    # stack helpers; R_ONE == 1 is an invariant at every emission point

    def push(self, reg: int):
        self.emit(Store(R_SP, reg), BinOpInstr("+", R_SP, R_ONE, R_SP))

    def pop(self, reg: int):
        self.emit(BinOpInstr("-", R_SP, R_ONE, R_SP), Load(R_SP, reg))

    def load_sp(self):
        self.emit(Const(DataLabel(self.stack_block, 0), R_AUX2), Load(R_AUX2, R_SP))

    def save_sp(self):
        self.emit(Const(DataLabel(self.stack_block, 0), R_AUX2), Store(R_AUX2, R_SP))


def _compile_expr(em: _Emitter, root, comp: SourceComponent):
    """Emit code leaving the value of the expression in R_AUX1.

    Driven by an explicit work stack (back-translated dispatchers nest far
    deeper than Python's recursion limit).  Work items are either
    expressions or callables performing emission between subtrees.
    """
    work = [root]
    while work:
        item = work.pop()
        if callable(item):
            item()
            continue
        e = item
        t = type(e)
        if t is S.IntLit:
            em.emit(Const(e.value, R_AUX1))
        elif t is S.Local:
            em.emit(Const(DataLabel(0, 0), R_AUX1))
        elif t is S.Exit:
            em.emit(Halt())
        elif t is S.BinOp:
            def binop_end(op=e.op):
                em.emit(Mov(R_AUX1, R_AUX2))
                em.pop(R_AUX1)
                em.emit(BinOpInstr(op, R_AUX1, R_AUX2, R_AUX1))
            work += [binop_end, e.right, lambda: em.push(R_AUX1), e.left]
        elif t is S.Seq:
            work += [e.second, e.first]
        elif t is S.If:
            then_label = em.fresh("then")
            end_label = em.fresh("end")

            def branch(tl=then_label, el=end_label):
                em.emit(Bnz(R_AUX1, tl))

            def else_done(tl=then_label, el=end_label):
                em.emit(Bnz(R_ONE, el))
                em.here(tl)

            work += [lambda el=end_label: em.here(el), e.then, else_done,
                     e.els, branch, e.cond]
        elif t is S.Alloc:
            work += [lambda: em.emit(AllocInstr(R_AUX1, R_AUX1)), e.size]
        elif t is S.Deref:
            work += [lambda: em.emit(Load(R_AUX1, R_AUX1)), e.target]
        elif t is S.Assign:
            def assign_end():
                em.pop(R_AUX2)
                em.emit(Store(R_AUX2, R_AUX1))
            work += [assign_end, e.value, lambda: em.push(R_AUX1), e.target]
        elif t is S.CallExpr:
            if e.comp == comp.cid:
                work += [lambda p=e.proc: em.emit(Jal(f"int_{p}")), e.arg]
            else:
                def do_call(dst=e.comp, proc=e.proc):
                    em.emit(Mov(R_AUX1, R_COM))
                    em.save_sp()
                    em.emit(Call(dst, proc))
                    # registers other than R_COM are invalid here
                    em.emit(Const(1, R_ONE))
                    em.load_sp()
                    em.emit(Mov(R_COM, R_AUX1))
                work += [do_call, e.arg]
        else:
            raise TypeError(f"not an expression: {e!r}")


def compile_component(comp: SourceComponent) -> MachineComponent:
    n_buffers = len(comp.buffers)
    stack_block = n_buffers
    code_block = n_buffers + 1
    em = _Emitter(stack_block=stack_block, code_block=code_block)

    for proc in sorted(comp.procedures):
        # body shared by the internal entry and the external wrapper
        em.here(f"int_{proc}")
        em.push(R_RA)
        _compile_expr(em, comp.procedures[proc], comp)
        em.pop(R_AUX2)
        em.emit(Jump(R_AUX2))

        if proc in comp.interface.exports:
            em.here(f"ext_{proc}")
            em.emit(Const(1, R_ONE))
            em.load_sp()
            em.push(R_RA)
            em.emit(Jal(f"int_{proc}"))
            em.emit(Mov(R_AUX1, R_COM))
            em.pop(R_RA)
            em.save_sp()
            em.emit(Return())

        # per-procedure boot stub so whole programs can start here without
        # knowing at component-compile time which procedure is main
        em.here(f"boot_{proc}")
        em.emit(Const(1, R_ONE))
        em.load_sp()
        em.emit(Jal(f"int_{proc}"))
        em.emit(Halt())

    buffers = {
        i: tuple(TOP if c is TOP else c for c in cells)
        for i, cells in enumerate(comp.buffers)
    }
    # cell 0 of the stack block holds the live stack-top pointer
    buffers[stack_block] = (Ptr(comp.cid, stack_block, 1),)

    return MachineComponent(
        interface=comp.interface,
        code={code_block: tuple(em.code)},
        buffers=buffers,
        labels=em.labels,
        entry_points={p: f"ext_{p}" for p in sorted(comp.interface.exports)},
        internal_entries={p: f"int_{p}" for p in sorted(comp.procedures)},
        growable=frozenset({stack_block}),
        name=comp.name,
    )


def compile_program(program: SourceProgram) -> MachineProgram:
    components = [compile_component(c) for c in program.components]
    return link_machine(components, program.main,
                        startup_label=f"boot_{program.main[1]}")
