"""The compartmentalized abstract machine.

RISC-like instruction set over per-component block memory, with dedicated
``Call``/``Return`` instructions that are the only way to transfer control
across components.  Cross-component calls push the caller's resume point on
a protected stack that user code cannot address; returns verify the return
address register against it.  Registers other than R_COM (and R_RA right
after a call) are invalidated to the undefined value at every
cross-component transfer.

Memory blocks are arrays of values; a block may be declared growable, in
which case stores past the current end extend it (memory here is unbounded;
the compiler uses one growable block per component as its local stack).
Immediates may be integers or data labels naming a cell of one of the
owning component's own blocks, so components cannot name each other's
memory.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace

from .trace import (
    HALTED, OUT_OF_FUEL, Interface, Outcome, ProgramInterface, TERMINATED,
    TracePrefix, Undef, ecall, env_interface, eret, undef_outcome,
)
from .values import TOP, CodePtr, Ptr, eval_binop
from .words import wrap64

ENV = 0

# Register file
R_ONE, R_COM, R_SP, R_RA, R_AUX1, R_AUX2 = range(6)
REGISTERS = ("R_ONE", "R_COM", "R_SP", "R_RA", "R_AUX1", "R_AUX2")
NUM_REGS = len(REGISTERS)


# --- instructions -----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class DataLabel:
    """Immediate resolving to a pointer into the owning component's block."""

    block: int
    off: int


@dataclass(frozen=True, slots=True)
class Nop:
    pass


@dataclass(frozen=True, slots=True)
class Halt:
    pass


@dataclass(frozen=True, slots=True)
class Const:
    imm: object  # int | DataLabel
    rd: int


@dataclass(frozen=True, slots=True)
class Mov:
    rs: int
    rd: int


@dataclass(frozen=True, slots=True)
class BinOpInstr:
    op: str
    r1: int
    r2: int
    rd: int


@dataclass(frozen=True, slots=True)
class Load:
    rp: int
    rd: int


@dataclass(frozen=True, slots=True)
class Store:
    rp: int
    rs: int


@dataclass(frozen=True, slots=True)
class Jal:
    label: str


@dataclass(frozen=True, slots=True)
class Jump:
    r: int


@dataclass(frozen=True, slots=True)
class Call:
    comp: int
    proc: str


@dataclass(frozen=True, slots=True)
class Return:
    pass


@dataclass(frozen=True, slots=True)
class Bnz:
    r: int
    label: str


@dataclass(frozen=True, slots=True)
class AllocInstr:
    rd: int
    rsize: int


Instr = (Nop | Halt | Const | Mov | BinOpInstr | Load | Store | Jal | Jump
         | Call | Return | Bnz | AllocInstr)


# --- programs ---------------------------------------------------------------


class MachineFormatError(Exception):
    pass


class MachineLoadError(Exception):
    pass


@dataclass(frozen=True)
class MachineComponent:
    interface: Interface
    code: dict[int, tuple[Instr, ...]]
    buffers: dict[int, tuple[object, ...]]  # initial data block contents
    labels: dict[str, tuple[int, int]]      # label -> (code block, offset)
    entry_points: dict[str, str]            # exported proc -> entry label
    internal_entries: dict[str, str]
    growable: frozenset[int] = frozenset()  # blocks that extend on store
    name: str = ""

    @property
    def cid(self) -> int:
        return self.interface.component

    def display_name(self) -> str:
        return self.name or f"C{self.cid}"

    def resolve(self, label: str) -> CodePtr | None:
        loc = self.labels.get(label)
        if loc is None:
            return None
        return CodePtr(self.cid, loc[0], loc[1])


@dataclass(frozen=True)
class MachineProgram:
    components: tuple[MachineComponent, ...]  # dense ids 1..n-1
    main: tuple[int, str]
    startup_label: str

    def component(self, cid: int) -> MachineComponent:
        return self.components[cid - 1]

    def interface(self) -> ProgramInterface:
        ifaces = [env_interface()] + [c.interface for c in self.components]
        return ProgramInterface(tuple(ifaces), self.main)

    def names(self) -> list[str]:
        return ["E"] + [c.display_name() for c in self.components]

    def with_component(self, comp: MachineComponent) -> "MachineProgram":
        comps = list(self.components)
        comps[comp.cid - 1] = comp
        return replace(self, components=tuple(comps))


def validate_machine_program(program: MachineProgram) -> None:
    """Loader checks: label targets exist, entries exported, blocks disjoint."""
    for comp in program.components:
        overlap = set(comp.code) & set(comp.buffers)
        if overlap:
            raise MachineLoadError(
                f"{comp.display_name()}: code and data share block ids {sorted(overlap)}")
        for proc, label in comp.entry_points.items():
            if proc not in comp.interface.exports:
                raise MachineLoadError(
                    f"{comp.display_name()}: entry point {proc!r} not exported")
            if comp.resolve(label) is None:
                raise MachineLoadError(
                    f"{comp.display_name()}: entry label {label!r} undefined")
        for label, (block, off) in comp.labels.items():
            if block not in comp.code or not (0 <= off <= len(comp.code[block])):
                raise MachineLoadError(
                    f"{comp.display_name()}: label {label!r} out of range")
        for block, instrs in comp.code.items():
            for ins in instrs:
                if type(ins) in (Jal, Bnz) and ins.label not in comp.labels:
                    raise MachineLoadError(
                        f"{comp.display_name()}: jump to undefined label {ins.label!r}")
                if type(ins) is Const and type(ins.imm) is DataLabel:
                    if ins.imm.block not in comp.buffers:
                        raise MachineLoadError(
                            f"{comp.display_name()}: data label to unknown block")
    mc, mp = program.main
    main_comp = program.component(mc)
    if program.startup_label not in main_comp.labels:
        raise MachineLoadError("startup label undefined in main component")


def link_machine(components, main: tuple[int, str],
                 startup_label: str = "__start") -> MachineProgram:
    ordered = tuple(sorted(components, key=lambda c: c.cid))
    for i, comp in enumerate(ordered, start=1):
        if comp.cid != i:
            raise MachineLoadError(f"component ids not dense at {comp.cid}")
    program = MachineProgram(ordered, main, startup_label)
    validate_machine_program(program)
    return program


# --- machine state and stepping ---------------------------------------------


class _GrowBlock:
    """Dict-backed block contents; reads past the end give TOP."""

    __slots__ = ("cells",)

    def __init__(self, initial: tuple):
        self.cells: dict[int, object] = dict(enumerate(initial))

    def get(self, off: int):
        if off < 0:
            return None
        return self.cells.get(off, TOP)

    def set(self, off: int, value) -> bool:
        if off < 0:
            return False
        self.cells[off] = value
        return True


@dataclass
class EnvPc:
    """Pseudo program counter: control is inside the environment."""

    proc: str


class MachineState:
    __slots__ = ("cur", "sigma", "mem", "regs", "pc", "tape", "tape_pos",
                 "next_block")

    def __init__(self, program: MachineProgram, env_tape: tuple[int, ...] = ()):
        self.cur = program.main[0]
        self.sigma: list[CodePtr] = []
        self.mem: dict[int, dict[int, object]] = {}
        self.next_block: dict[int, int] = {}
        for comp in program.components:
            blocks: dict[int, object] = {}
            for b, cells in comp.buffers.items():
                if b in comp.growable:
                    blocks[b] = _GrowBlock(cells)
                else:
                    blocks[b] = list(cells)
            self.mem[comp.cid] = blocks
            self.next_block[comp.cid] = max(list(comp.buffers) + list(comp.code), default=-1) + 1
        self.regs: list = [TOP] * NUM_REGS
        self.regs[R_ONE] = 1
        self.regs[R_COM] = 0
        main_comp = program.component(program.main[0])
        self.pc = main_comp.resolve(program.startup_label)
        self.tape = tuple(env_tape)
        self.tape_pos = 0

    def load(self, ptr: Ptr):
        block = self.mem.get(ptr.comp, {}).get(ptr.block)
        if block is None:
            return None
        if type(block) is _GrowBlock:
            return block.get(ptr.off)
        if not (0 <= ptr.off < len(block)):
            return None
        return block[ptr.off]

    def store(self, ptr: Ptr, value) -> bool:
        block = self.mem.get(ptr.comp, {}).get(ptr.block)
        if block is None:
            return False
        if type(block) is _GrowBlock:
            return block.set(ptr.off, value)
        if not (0 <= ptr.off < len(block)):
            return False
        block[ptr.off] = value
        return True

    def alloc(self, comp_id: int, size: int) -> Ptr:
        block = self.next_block[comp_id]
        self.next_block[comp_id] = block + 1
        self.mem[comp_id][block] = [TOP] * size
        return Ptr(comp_id, block, 0)


STEP_OK = "ok"
STEP_HALT = "halt"
STEP_STUCK = "stuck"


def _invalidate(regs: list):
    com = regs[R_COM]
    for i in range(NUM_REGS):
        regs[i] = TOP
    regs[R_COM] = com


def mstep(program: MachineProgram, state: MachineState):
    """One transition.  Returns (status, event-or-None).

    status: "ok" (stepped), "halt", or "stuck" (undefined behavior of the
    current component).  The event, if any, is a cross-component call or
    return.
    """
    pc = state.pc
    regs = state.regs

    if type(pc) is EnvPc:
        # the environment answers the pending call and returns
        if pc.proc == "read":
            answer = state.tape[state.tape_pos] if state.tape_pos < len(state.tape) else 0
            state.tape_pos += 1
        else:
            answer = 0
        answer = wrap64(answer)
        frame = state.sigma.pop()
        _invalidate(regs)
        regs[R_COM] = answer
        state.cur = frame.comp
        state.pc = frame
        return STEP_OK, eret(ENV, frame.comp, answer)

    comp = program.component(state.cur)
    code = comp.code.get(pc.block)
    if pc.comp != state.cur or code is None or not (0 <= pc.off < len(code)):
        return STEP_STUCK, None
    ins = code[pc.off]
    t = type(ins)

    if t is Nop:
        state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    if t is Halt:
        return STEP_HALT, None
    if t is Const:
        imm = ins.imm
        if type(imm) is DataLabel:
            regs[ins.rd] = Ptr(state.cur, imm.block, imm.off)
        else:
            regs[ins.rd] = wrap64(imm)
        state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    if t is Mov:
        regs[ins.rd] = regs[ins.rs]
        state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    if t is BinOpInstr:
        a, b = regs[ins.r1], regs[ins.r2]
        if type(a) is CodePtr or type(b) is CodePtr:
            regs[ins.rd] = TOP
        else:
            regs[ins.rd] = eval_binop(ins.op, a, b)
        state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    if t is Load:
        ptr = regs[ins.rp]
        if type(ptr) is not Ptr or ptr.comp != state.cur:
            return STEP_STUCK, None
        value = state.load(ptr)
        if value is None:
            return STEP_STUCK, None
        regs[ins.rd] = value
        state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    if t is Store:
        ptr = regs[ins.rp]
        if type(ptr) is not Ptr or ptr.comp != state.cur:
            return STEP_STUCK, None
        if ptr.block in comp.code:
            return STEP_STUCK, None
        if not state.store(ptr, regs[ins.rs]):
            return STEP_STUCK, None
        state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    if t is Jal:
        target = comp.resolve(ins.label)
        if target is None:
            return STEP_STUCK, None
        regs[R_RA] = CodePtr(pc.comp, pc.block, pc.off + 1)
        state.pc = target
        return STEP_OK, None
    if t is Jump:
        target = regs[ins.r]
        if type(target) is not CodePtr or target.comp != state.cur:
            return STEP_STUCK, None
        state.pc = target
        return STEP_OK, None
    if t is Bnz:
        cond = regs[ins.r]
        if type(cond) is not int:
            return STEP_STUCK, None
        if cond != 0:
            target = comp.resolve(ins.label)
            if target is None:
                return STEP_STUCK, None
            state.pc = target
        else:
            state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    if t is Call:
        dst, proc = ins.comp, ins.proc
        if dst == state.cur:
            return STEP_STUCK, None
        if (dst, proc) not in comp.interface.imports:
            return STEP_STUCK, None
        arg = regs[R_COM]
        if type(arg) is not int:
            return STEP_STUCK, None
        resume = CodePtr(pc.comp, pc.block, pc.off + 1)
        if dst == ENV:
            state.sigma.append(resume)
            _invalidate(regs)
            regs[R_RA] = resume
            state.cur = ENV
            state.pc = EnvPc(proc)
            return STEP_OK, ecall(resume.comp, ENV, proc, arg)
        callee = program.component(dst)
        entry_label = callee.entry_points.get(proc)
        entry = callee.resolve(entry_label) if entry_label else None
        if entry is None:
            return STEP_STUCK, None
        state.sigma.append(resume)
        _invalidate(regs)
        regs[R_RA] = resume
        state.cur = dst
        state.pc = entry
        return STEP_OK, ecall(resume.comp, dst, proc, arg)
    if t is Return:
        if not state.sigma:
            return STEP_STUCK, None
        top = state.sigma[-1]
        if regs[R_RA] != top:
            return STEP_STUCK, None
        if top.comp == state.cur:
            return STEP_STUCK, None
        value = regs[R_COM]
        if type(value) is not int:
            return STEP_STUCK, None
        state.sigma.pop()
        _invalidate(regs)
        src = state.cur
        state.cur = top.comp
        state.pc = top
        return STEP_OK, eret(src, top.comp, value)
    if t is AllocInstr:
        size = regs[ins.rsize]
        if type(size) is not int or size <= 0:
            return STEP_STUCK, None
        regs[ins.rd] = state.alloc(state.cur, size)
        state.pc = CodePtr(pc.comp, pc.block, pc.off + 1)
        return STEP_OK, None
    raise AssertionError(f"unknown instruction {ins!r}")


def mrun(program: MachineProgram, fuel: int,
         env_tape: tuple[int, ...] = ()) -> tuple[TracePrefix, Outcome]:
    """Iterate mstep from the initial state."""
    validate_machine_program(program)
    state = MachineState(program, env_tape)
    trace: list = []
    while fuel > 0:
        fuel -= 1
        status, event = mstep(program, state)
        if event is not None:
            trace.append(event)
        if status == STEP_HALT:
            return TracePrefix(tuple(trace), TERMINATED), HALTED
        if status == STEP_STUCK:
            return (TracePrefix(tuple(trace), Undef(state.cur)),
                    undef_outcome(state.cur))
    return TracePrefix(tuple(trace)), OUT_OF_FUEL


# --- binary program format ---------------------------------------------------

_MAGIC = b"CPMPRG"
_VERSION = 1


def _enc_value(v) -> object:
    if v is TOP:
        return ["top"]
    if type(v) is int:
        return v
    if type(v) is Ptr:
        return ["ptr", v.comp, v.block, v.off]
    if type(v) is CodePtr:
        return ["code", v.comp, v.block, v.off]
    raise MachineFormatError(f"unserializable value {v!r}")


def _dec_value(v):
    if type(v) is int:
        return v
    tag = v[0]
    if tag == "top":
        return TOP
    if tag == "ptr":
        return Ptr(v[1], v[2], v[3])
    if tag == "code":
        return CodePtr(v[1], v[2], v[3])
    raise MachineFormatError(f"bad value encoding {v!r}")


def _enc_instr(ins: Instr) -> list:
    t = type(ins)
    if t is Nop:
        return ["nop"]
    if t is Halt:
        return ["halt"]
    if t is Const:
        imm = (["dlabel", ins.imm.block, ins.imm.off]
               if type(ins.imm) is DataLabel else ins.imm)
        return ["const", imm, ins.rd]
    if t is Mov:
        return ["mov", ins.rs, ins.rd]
    if t is BinOpInstr:
        return ["binop", ins.op, ins.r1, ins.r2, ins.rd]
    if t is Load:
        return ["load", ins.rp, ins.rd]
    if t is Store:
        return ["store", ins.rp, ins.rs]
    if t is Jal:
        return ["jal", ins.label]
    if t is Jump:
        return ["jump", ins.r]
    if t is Call:
        return ["call", ins.comp, ins.proc]
    if t is Return:
        return ["return"]
    if t is Bnz:
        return ["bnz", ins.r, ins.label]
    if t is AllocInstr:
        return ["alloc", ins.rd, ins.rsize]
    raise MachineFormatError(f"unserializable instruction {ins!r}")


def _dec_instr(data: list) -> Instr:
    tag = data[0]
    if tag == "nop":
        return Nop()
    if tag == "halt":
        return Halt()
    if tag == "const":
        imm = data[1]
        if type(imm) is list:
            imm = DataLabel(imm[1], imm[2])
        return Const(imm, data[2])
    if tag == "mov":
        return Mov(data[1], data[2])
    if tag == "binop":
        return BinOpInstr(data[1], data[2], data[3], data[4])
    if tag == "load":
        return Load(data[1], data[2])
    if tag == "store":
        return Store(data[1], data[2])
    if tag == "jal":
        return Jal(data[1])
    if tag == "jump":
        return Jump(data[1])
    if tag == "call":
        return Call(data[1], data[2])
    if tag == "return":
        return Return()
    if tag == "bnz":
        return Bnz(data[1], data[2])
    if tag == "alloc":
        return AllocInstr(data[1], data[2])
    raise MachineFormatError(f"bad instruction encoding {data!r}")


def save_machine_program(program: MachineProgram) -> bytes:
    doc = {
        "main": list(program.main),
        "startup": program.startup_label,
        "components": [
            {
                "id": c.cid,
                "name": c.name,
                "exports": sorted(c.interface.exports),
                "imports": sorted([list(i) for i in c.interface.imports]),
                "code": {str(b): [_enc_instr(i) for i in instrs]
                         for b, instrs in sorted(c.code.items())},
                "buffers": {str(b): [_enc_value(v) for v in cells]
                            for b, cells in sorted(c.buffers.items())},
                "labels": {l: list(loc) for l, loc in sorted(c.labels.items())},
                "entry_points": dict(sorted(c.entry_points.items())),
                "internal_entries": dict(sorted(c.internal_entries.items())),
                "growable": sorted(c.growable),
            }
            for c in program.components
        ],
    }
    payload = zlib.compress(json.dumps(doc, sort_keys=True).encode())
    return _MAGIC + bytes([_VERSION]) + payload


def load_machine_program(data: bytes) -> MachineProgram:
    if data[: len(_MAGIC)] != _MAGIC:
        raise MachineFormatError("bad magic")
    if len(data) < len(_MAGIC) + 1 or data[len(_MAGIC)] != _VERSION:
        raise MachineFormatError("unsupported version")
    try:
        doc = json.loads(zlib.decompress(data[len(_MAGIC) + 1:]))
        components = []
        for c in doc["components"]:
            iface = Interface(
                c["id"], frozenset(c["exports"]),
                frozenset((int(i[0]), i[1]) for i in c["imports"]))
            components.append(MachineComponent(
                interface=iface,
                code={int(b): tuple(_dec_instr(i) for i in instrs)
                      for b, instrs in c["code"].items()},
                buffers={int(b): tuple(_dec_value(v) for v in cells)
                         for b, cells in c["buffers"].items()},
                labels={l: (loc[0], loc[1]) for l, loc in c["labels"].items()},
                entry_points=dict(c["entry_points"]),
                internal_entries=dict(c["internal_entries"]),
                growable=frozenset(c["growable"]),
                name=c["name"],
            ))
        program = MachineProgram(tuple(components),
                                 (doc["main"][0], doc["main"][1]), doc["startup"])
    except MachineFormatError:
        raise
    except Exception as exc:
        raise MachineFormatError(f"corrupt program file: {exc}") from exc
    validate_machine_program(program)
    return program


def render_disassembly(program: MachineProgram) -> str:
    """Human-readable listing, for debugging."""
    out = [f"main {program.main[0]}.{program.main[1]}  start {program.startup_label}"]
    for comp in program.components:
        out.append(f"component {comp.cid} ({comp.display_name()})")
        by_pos = {loc: l for l, loc in comp.labels.items()}
        for block in sorted(comp.code):
            out.append(f"  code block {block}:")
            for off, ins in enumerate(comp.code[block]):
                label = by_pos.get((block, off))
                mark = f"{label}:" if label else ""
                out.append(f"    {mark:>20} {off:4}  {_fmt_instr(ins)}")
        for block in sorted(comp.buffers):
            grow = " (growable)" if block in comp.growable else ""
            out.append(f"  data block {block}{grow}: {list(comp.buffers[block])!r}")
    return "\n".join(out)


def _fmt_instr(ins: Instr) -> str:
    t = type(ins)
    if t is Const:
        imm = (f"&({ins.imm.block},{ins.imm.off})"
               if type(ins.imm) is DataLabel else str(ins.imm))
        return f"Const {imm} -> {REGISTERS[ins.rd]}"
    if t is Mov:
        return f"Mov {REGISTERS[ins.rs]} -> {REGISTERS[ins.rd]}"
    if t is BinOpInstr:
        return (f"BinOp {REGISTERS[ins.r1]} {ins.op} {REGISTERS[ins.r2]} "
                f"-> {REGISTERS[ins.rd]}")
    if t is Load:
        return f"Load *{REGISTERS[ins.rp]} -> {REGISTERS[ins.rd]}"
    if t is Store:
        return f"Store *{REGISTERS[ins.rp]} <- {REGISTERS[ins.rs]}"
    if t is Jal:
        return f"Jal {ins.label}"
    if t is Jump:
        return f"Jump {REGISTERS[ins.r]}"
    if t is Call:
        return f"Call {ins.comp} {ins.proc}"
    if t is Bnz:
        return f"Bnz {REGISTERS[ins.r]} {ins.label}"
    if t is AllocInstr:
        return f"Alloc {REGISTERS[ins.rd]} {REGISTERS[ins.rsize]}"
    return t.__name__
