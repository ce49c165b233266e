"""Small-step evaluator for the source language, with event emission.

The evaluator is a machine over (component, control, continuation stack,
memory); one transition costs one unit of fuel.  Cross-component calls and
returns emit events; everything else is silent.  Undefined behavior stops
the run with an outcome blaming the component whose expression was being
reduced.

Only machine integers may cross a component boundary: passing a pointer or
the undefined value as a cross-component argument or return value is
undefined behavior of the sender.  Calls into the environment return the
next tape integer (``read``; an exhausted tape returns 0) or 0 (``write``)
and emit the answering return event on the environment's behalf.
"""

from __future__ import annotations

from .source import (
    Alloc, Assign, BinOp, CallExpr, Deref, Exit, If, IntLit, Local, Seq,
    SourceProgram,
)
from .trace import (
    HALTED, OUT_OF_FUEL, Outcome, TERMINATED, TERMINATED_OUTCOME, TracePrefix,
    Undef, ecall, eret, undef_outcome,
)
from .values import TOP, Ptr, eval_binop
from .words import wrap64

ENV = 0


class Memory:
    """Per-component block memory; uninitialized cells hold TOP."""

    def __init__(self, program: SourceProgram):
        self.blocks: dict[int, dict[int, list]] = {}
        self.next_block: dict[int, int] = {}
        for comp in program.components:
            self.blocks[comp.cid] = {
                i: [TOP if c is TOP else wrap64(c) for c in buf]
                for i, buf in enumerate(comp.buffers)
            }
            self.next_block[comp.cid] = len(comp.buffers)

    def load(self, ptr: Ptr):
        """Cell value, or None when the access is out of bounds/dangling."""
        block = self.blocks.get(ptr.comp, {}).get(ptr.block)
        if block is None or not (0 <= ptr.off < len(block)):
            return None
        return block[ptr.off]

    def store(self, ptr: Ptr, value) -> bool:
        block = self.blocks.get(ptr.comp, {}).get(ptr.block)
        if block is None or not (0 <= ptr.off < len(block)):
            return False
        block[ptr.off] = value
        return True

    def alloc(self, comp: int, size: int) -> Ptr:
        block = self.next_block[comp]
        self.next_block[comp] = block + 1
        self.blocks[comp][block] = [TOP] * size
        return Ptr(comp, block, 0)


def run_source(program: SourceProgram, fuel: int,
               env_tape: tuple[int, ...] | None = None) -> tuple[TracePrefix, Outcome]:
    """Run a whole program for at most ``fuel`` transitions."""
    tape = program.env_tape if env_tape is None else tuple(env_tape)
    mem = Memory(program)
    trace: list = []
    tape_pos = 0

    cur = program.main[0]
    control = program.component(cur).procedures[program.main[1]]
    value = None          # set when control is None (value mode)
    kont: list = []

    def stop(outcome: Outcome) -> tuple[TracePrefix, Outcome]:
        term = None
        if outcome.kind == "terminated":
            term = TERMINATED
        elif outcome.kind == "undef":
            term = Undef(outcome.component)
        return TracePrefix(tuple(trace), term), outcome

    while True:
        if fuel <= 0:
            return stop(OUT_OF_FUEL)
        fuel -= 1

        if control is not None:
            e = control
            t = type(e)
            if t is IntLit:
                control, value = None, wrap64(e.value)
            elif t is Local:
                control, value = None, Ptr(cur, 0, 0)
            elif t is Exit:
                return stop(TERMINATED_OUTCOME)
            elif t is BinOp:
                kont.append(("binop1", e.op, e.right))
                control = e.left
            elif t is Seq:
                kont.append(("seq", e.second))
                control = e.first
            elif t is If:
                kont.append(("if", e.then, e.els))
                control = e.cond
            elif t is Alloc:
                kont.append(("alloc",))
                control = e.size
            elif t is Deref:
                kont.append(("deref",))
                control = e.target
            elif t is Assign:
                kont.append(("assign1", e.value))
                control = e.target
            elif t is CallExpr:
                kont.append(("call", e.comp, e.proc))
                control = e.arg
            else:
                raise TypeError(f"not an expression: {e!r}")
            continue

        # value mode: consume the top continuation frame
        if not kont:
            return stop(TERMINATED_OUTCOME)  # main finished normally
        frame = kont.pop()
        op = frame[0]

        if op == "binop1":
            kont.append(("binop2", frame[1], value))
            control = frame[2]
        elif op == "binop2":
            value = eval_binop(frame[1], frame[2], value)
        elif op == "seq":
            control = frame[1]
        elif op == "if":
            if type(value) is not int:
                return stop(undef_outcome(cur))
            control = frame[1] if value != 0 else frame[2]
        elif op == "alloc":
            if type(value) is not int or value <= 0:
                return stop(undef_outcome(cur))
            value = mem.alloc(cur, value)
        elif op == "deref":
            if type(value) is not Ptr or value.comp != cur:
                return stop(undef_outcome(cur))
            loaded = mem.load(value)
            if loaded is None:
                return stop(undef_outcome(cur))
            value = loaded
        elif op == "assign1":
            kont.append(("assign2", value))
            control = frame[1]
        elif op == "assign2":
            target = frame[1]
            if type(target) is not Ptr or target.comp != cur:
                return stop(undef_outcome(cur))
            if not mem.store(target, value):
                return stop(undef_outcome(cur))
            # the assignment's value is the stored value
        elif op == "call":
            dst, proc = frame[1], frame[2]
            if dst == cur:
                kont.append(("ret", cur, False))
                control = program.component(cur).procedures[proc]
            elif dst == ENV:
                if type(value) is not int:
                    return stop(undef_outcome(cur))
                trace.append(ecall(cur, ENV, proc, value))
                if proc == "read":
                    answer = tape[tape_pos] if tape_pos < len(tape) else 0
                    tape_pos += 1
                else:
                    answer = 0
                trace.append(eret(ENV, cur, wrap64(answer)))
                value = wrap64(answer)
            else:
                if type(value) is not int:
                    return stop(undef_outcome(cur))
                trace.append(ecall(cur, dst, proc, value))
                kont.append(("ret", cur, True))
                cur = dst
                control = program.component(dst).procedures[proc]
        elif op == "ret":
            caller, cross = frame[1], frame[2]
            if cross:
                if type(value) is not int:
                    return stop(undef_outcome(cur))
                trace.append(eret(cur, caller, value))
                cur = caller
        else:
            raise AssertionError(f"bad frame {frame!r}")
