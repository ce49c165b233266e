"""Software-fault-isolation back end targeting the bare-metal machine.

Memory layout.  A flat address is (slot, component, offset):
``addr = slot << (cb+ob) | component << ob | offset`` with ob = offset bits
per slot and cb = component-id bits.  Slot parity separates code (even)
from data (odd).  The component field 0 belongs to the protected runtime:
component stores are masked to their own component id, so no component can
ever write a runtime address.  Per component, code lives in slot 0, static
block b in slot 1+2b, and allocations grow over further odd slots.  The
runtime keeps the environment stubs and the allocator service in (slot 0,
comp 0), global cells in (1, 0), the shadow stack in (3, 0), and the input
tape in (5, 0).

Instrumentation.  Every store is preceded by exactly two instructions that
mask the target into the component's own data region.  Every indirect jump
is masked to the component's own code slot parity with the low four
offset bits zeroed, so masked jumps land only on sixteen-word-aligned
addresses; every legitimate landing pad for them is aligned, and no
instrumentation sequence straddles an alignment block, so sequences always
execute from their first instruction.  A cross-component call is a direct
Jal to the callee's entry: each entry starts one word past an aligned
guard Halt, followed by the shadow-stack push of the hardware return
address and the reload of the callee's reserved mask registers, all within
the guard's sixteen-word block.  Return pops the shadow stack and jumps,
from an aligned block of its own; the popped jump is deliberately
unmasked, which is safe because only the pop sequence can produce it.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

from .flat import (
    BNZ, BINOP, BOP_ADD, BOP_AND, BOP_LE, BOP_LT, BOP_OF_NAME, BOP_OR,
    BOP_SUB, CONST, HALT, JAL, JUMP, LOAD, MOV, NOP, NUM_FLAT_REGS,
    R_COM, R_ONE, R_RA, SFI_SSP, SFI_STORE_AND, SFI_STORE_OR, SFI_JMP_OR,
    SFI_TMP1, SFI_TMP2, SFI_TMP3, STORE, FlatAsm, decode, emit_const_value, encode,
    flat_binop, imm_fits, render_word,
)
from .machine import (
    AllocInstr, BinOpInstr, Bnz, Call, Const, DataLabel, Halt, Jal, Jump,
    Load, MachineProgram, Mov, Nop, Return, Store,
)
from .trace import (
    HALTED, OUT_OF_FUEL, Outcome, TERMINATED, TracePrefix, ecall, eret,
)
from .values import TOP, Ptr
from .words import wrap64

ENV = 0
ALIGN = 16
NOP_WORD = encode(NOP)
HALT_WORD = encode(HALT)


class CapacityError(Exception):
    pass


class SfiFormatError(Exception):
    pass


@dataclass(frozen=True)
class LayoutConfig:
    offset_bits: int = 12
    component_bits: int | None = None  # None: smallest that fits
    alloc_slot_budget: int = 1024

    def __post_init__(self):
        if self.offset_bits < 6:
            raise ValueError("offset_bits must be at least 6")


def _fit_component_bits(n_components: int) -> int:
    bits = 1
    while (1 << bits) < n_components:
        bits += 1
    return bits


def phys_encode(component: int, slot: int, offset: int, ob: int, cb: int) -> int:
    if not (0 <= component < (1 << cb)):
        raise ValueError(f"component {component} does not fit {cb} bits")
    if not (0 <= offset < (1 << ob)):
        raise ValueError(f"offset {offset} does not fit {ob} bits")
    if slot < 0:
        raise ValueError("slot must be nonnegative")
    return (slot << (cb + ob)) | (component << ob) | offset


def phys_decode(addr: int, ob: int, cb: int) -> tuple[int, int, int]:
    """(component, slot, offset) of a flat address."""
    if addr < 0:
        raise ValueError("negative address")
    return (addr >> ob) & ((1 << cb) - 1), addr >> (cb + ob), addr & ((1 << ob) - 1)


# --- image -------------------------------------------------------------------


@dataclass
class SfiImage:
    memory: dict[int, int]
    initial_regs: tuple[int, ...]
    entry_addr: int
    meta: dict

    def copy(self) -> "SfiImage":
        return SfiImage(dict(self.memory), self.initial_regs, self.entry_addr,
                        json.loads(json.dumps(self.meta)))


@dataclass
class SfiLog:
    writes: list = field(default_factory=list)      # (pc, pc_comp, addr)
    transfers: list = field(default_factory=list)   # (from_pc, from_comp, to_pc, to_comp, kind)
    halts: list = field(default_factory=list)       # (pc,)

    def to_json_lines(self) -> str:
        out = []
        for pc, comp, addr in self.writes:
            out.append(json.dumps({"type": "write", "pc": pc, "component": comp,
                                   "addr": addr}, sort_keys=True))
        for frm, fc, to, tc, kind in self.transfers:
            out.append(json.dumps({"type": "transfer", "from": frm,
                                   "from_component": fc, "to": to,
                                   "to_component": tc, "kind": kind},
                                  sort_keys=True))
        for (pc,) in self.halts:
            out.append(json.dumps({"type": "halt", "pc": pc}, sort_keys=True))
        return "\n".join(out) + ("\n" if out else "")


# --- runtime assembly ---------------------------------------------------------


class _Asm(FlatAsm):
    def align(self):
        while (self.base + len(self.words)) % ALIGN:
            self.emit(NOP_WORD)

    def fit(self, n: int):
        """Pad so the next n words share one alignment block."""
        room = ALIGN - (self.base + len(self.words)) % ALIGN
        if room < n:
            self.align()


def _const(rd: int, value: int) -> int:
    return encode(CONST, rd=rd, imm=value)


def _binop(sub: int, r1: int, r2: int, rd: int) -> int:
    return encode(BINOP, rd=rd, rs1=r1, rs2=r2, imm=sub)


def _build_runtime(asm: _Asm, layout: "_Layout") -> dict:
    """Environment stubs and the allocation service, in (slot 0, comp 0)."""
    entries = {}

    def push_ra():
        asm.emit(encode(STORE, rs1=SFI_SSP, rs2=R_RA))
        asm.emit(_const(SFI_TMP1, 1))
        asm.emit(_binop(BOP_ADD, SFI_SSP, SFI_TMP1, SFI_SSP))

    def pop_jump():
        asm.emit(_const(SFI_TMP1, 1))
        asm.emit(_binop(BOP_SUB, SFI_SSP, SFI_TMP1, SFI_SSP))
        asm.emit(encode(LOAD, rd=SFI_TMP1, rs1=SFI_SSP))
        asm.emit(encode(JUMP, rs1=SFI_TMP1))

    # E.read
    asm.align()
    asm.emit(HALT_WORD)  # aligned guard
    entries[asm.addr] = (ENV, "read")
    push_ra()
    asm.emit(_const(SFI_TMP1, layout.tape_cursor))
    asm.emit(encode(LOAD, rd=SFI_TMP2, rs1=SFI_TMP1))      # TMP2 = index
    asm.emit(_const(SFI_TMP3, layout.tape_len))
    asm.emit(encode(LOAD, rd=SFI_TMP3, rs1=SFI_TMP3))      # TMP3 = length
    asm.emit(_binop(BOP_LT, SFI_TMP2, SFI_TMP3, SFI_TMP3))
    asm.jump_to("read_have", SFI_TMP3)
    asm.emit(_const(R_COM, 0))                              # exhausted tape
    asm.emit(_const(SFI_TMP3, 1))
    asm.jump_to("read_done", SFI_TMP3)
    asm.here("read_have")
    asm.emit(_const(SFI_TMP3, layout.tape_data))
    asm.emit(_binop(BOP_ADD, SFI_TMP3, SFI_TMP2, SFI_TMP3))
    asm.emit(encode(LOAD, rd=R_COM, rs1=SFI_TMP3))
    asm.here("read_done")
    asm.emit(_const(SFI_TMP3, 1))
    asm.emit(_binop(BOP_ADD, SFI_TMP2, SFI_TMP3, SFI_TMP2))
    asm.emit(_const(SFI_TMP1, layout.tape_cursor))
    asm.emit(encode(STORE, rs1=SFI_TMP1, rs2=SFI_TMP2))
    pop_jump()

    # E.write: answer 0
    asm.align()
    asm.emit(HALT_WORD)
    entries[asm.addr] = (ENV, "write")
    push_ra()
    asm.emit(_const(R_COM, 0))
    pop_jump()

    # allocation service: TMP1 = caller's cursor cell, TMP2 = size (in);
    # TMP2 = fresh base (out); halts when the slot budget or slot size is
    # exceeded
    asm.align()
    svc_start = asm.addr
    asm.here("svc_alloc")
    asm.emit(_const(SFI_TMP3, layout.svc_scratch0))
    asm.emit(encode(STORE, rs1=SFI_TMP3, rs2=SFI_TMP1))     # save cursor cell
    asm.emit(_const(SFI_TMP3, layout.svc_scratch1))
    asm.emit(encode(STORE, rs1=SFI_TMP3, rs2=SFI_TMP2))     # save size
    asm.emit(encode(LOAD, rd=SFI_TMP2, rs1=SFI_TMP1))       # TMP2 = cursor
    asm.emit(_const(SFI_TMP3, 1))
    asm.emit(_binop(BOP_ADD, SFI_TMP1, SFI_TMP3, SFI_TMP1))
    asm.emit(encode(LOAD, rd=SFI_TMP1, rs1=SFI_TMP1))       # TMP1 = limit
    asm.emit(_binop(BOP_LT, SFI_TMP2, SFI_TMP1, SFI_TMP1))
    asm.jump_to("svc_room", SFI_TMP1)
    asm.emit(HALT_WORD)                                     # budget exhausted
    asm.here("svc_room")
    asm.emit(_const(SFI_TMP3, layout.svc_scratch1))
    asm.emit(encode(LOAD, rd=SFI_TMP3, rs1=SFI_TMP3))       # TMP3 = size
    asm.emit(_const(SFI_TMP1, layout.slot_words))
    asm.emit(_binop(BOP_LE, SFI_TMP3, SFI_TMP1, SFI_TMP1))
    asm.jump_to("svc_fits", SFI_TMP1)
    asm.emit(HALT_WORD)                                     # block > one slot
    asm.here("svc_fits")
    asm.emit(_const(SFI_TMP1, layout.slot_stride * 2))
    asm.emit(_binop(BOP_ADD, SFI_TMP2, SFI_TMP1, SFI_TMP1))  # new cursor
    asm.emit(_const(SFI_TMP3, layout.svc_scratch0))
    asm.emit(encode(LOAD, rd=SFI_TMP3, rs1=SFI_TMP3))
    asm.emit(encode(STORE, rs1=SFI_TMP3, rs2=SFI_TMP1))
    asm.emit(encode(JUMP, rs1=R_RA))
    svc_end = asm.addr
    asm.resolve()
    return {"entries": entries, "service": [svc_start, svc_end]}


# --- layout ------------------------------------------------------------------


class _Layout:
    def __init__(self, program: MachineProgram, cfg: LayoutConfig):
        self.ob = cfg.offset_bits
        n = len(program.components) + 1
        cb = cfg.component_bits
        if cb is None:
            cb = _fit_component_bits(n)
        elif (1 << cb) < n:
            raise CapacityError(f"{n} components do not fit {cb} component bits")
        self.cb = cb
        self.slot_words = 1 << self.ob
        self.slot_stride = 1 << (self.cb + self.ob)  # one slot step
        self.alloc_budget = cfg.alloc_slot_budget
        # runtime cells
        self.globals_base = self.phys(0, 1, 0)
        self.shadow_base = self.phys(0, 3, 0)
        self.tape_cursor = self.phys(0, 5, 0)
        self.tape_len = self.phys(0, 5, 1)
        self.tape_data = self.phys(0, 5, 2)
        self.tape_capacity = self.slot_words - 2
        self.svc_scratch0 = self.phys(0, 1, 250)
        self.svc_scratch1 = self.phys(0, 1, 251)
        if 2 * n >= 250:
            raise CapacityError("too many components for the runtime cell layout")

    def phys(self, comp: int, slot: int, off: int) -> int:
        return phys_encode(comp, slot, off, self.ob, self.cb)

    def cursor_cell(self, comp: int) -> int:
        return self.globals_base + 2 * comp

    def limit_cell(self, comp: int) -> int:
        return self.globals_base + 2 * comp + 1

    def block_slot(self, block: int) -> int:
        return 1 + 2 * block

    def data_addr(self, comp: int, block: int, off: int) -> int:
        return self.phys(comp, self.block_slot(block), off)

    def code_base(self, comp: int) -> int:
        return self.phys(comp, 0, 0)

    def store_and_mask(self) -> int:
        return ~(((1 << self.cb) - 1) << self.ob)

    def store_or_value(self, comp: int) -> int:
        return (comp << self.ob) | (1 << (self.ob + self.cb))

    def jump_and_mask(self) -> int:
        return ~((((1 << self.cb) - 1) << self.ob)
                 | (1 << (self.ob + self.cb)) | 0xF)

    def jump_or_value(self, comp: int) -> int:
        return comp << self.ob

    def comp_of(self, addr: int) -> int:
        return (addr >> self.ob) & ((1 << self.cb) - 1)

    def parity_of(self, addr: int) -> int:
        return (addr >> (self.ob + self.cb)) & 1


# --- translation --------------------------------------------------------------


class _ComponentCode:
    def __init__(self, cid: int, base: int):
        self.cid = cid
        self.base = base
        self.words: list[int] = []
        self.entry_addrs: dict[str, int] = {}
        self.pos_map: dict[tuple[int, int], int] = {}   # compart (block, off) -> addr
        self.local_fixups: list = []   # (pos, op, rs1, (block, off))
        self.cross_fixups: list = []   # (pos, dst_comp, proc)
        self.store_sites: list = []
        self.jump_sites: list = []
        self.push_sites: list = []
        self.pop_sites: list = []

    @property
    def addr(self) -> int:
        return self.base + len(self.words)

    def align(self):
        while self.addr % ALIGN:
            self.words.append(NOP_WORD)

    def fit(self, n: int):
        room = ALIGN - self.addr % ALIGN
        if room < n:
            self.align()


def _translate_component(comp, layout: _Layout, svc_addr: int) -> _ComponentCode:
    cid = comp.cid
    cc = _ComponentCode(cid, layout.code_base(cid))
    entry_positions = {}
    for proc, label in comp.entry_points.items():
        entry_positions[comp.labels[label]] = proc

    for block in sorted(comp.code):
        cc.align()
        instrs = comp.code[block]
        for off in range(len(instrs) + 1):
            pos = (block, off)
            if pos in entry_positions:
                proc = entry_positions[pos]
                cc.align()
                cc.words.append(HALT_WORD)  # aligned guard
                entry = cc.addr
                cc.entry_addrs[proc] = entry
                cc.push_sites.append({"store": cc.addr})
                cc.words.append(encode(STORE, rs1=SFI_SSP, rs2=R_RA))
                cc.words.append(_const(SFI_TMP1, 1))
                cc.words.append(_binop(BOP_ADD, SFI_SSP, SFI_TMP1, SFI_SSP))
                cc.words.append(_const(SFI_STORE_OR, layout.store_or_value(cid)))
                cc.words.append(_const(SFI_JMP_OR, layout.jump_or_value(cid)))
            if off == len(instrs):
                break
            cc.pos_map[pos] = cc.addr
            ins = instrs[off]
            t = type(ins)
            if t is Nop:
                cc.words.append(NOP_WORD)
            elif t is Halt:
                cc.words.append(HALT_WORD)
            elif t is Const:
                if type(ins.imm) is DataLabel:
                    addr = layout.data_addr(cid, ins.imm.block, ins.imm.off)
                    cc.words.append(_const(ins.rd, addr))
                else:
                    emit_const_value(cc.words, ins.rd, wrap64(ins.imm))
            elif t is Mov:
                cc.words.append(encode(MOV, rd=ins.rd, rs1=ins.rs))
            elif t is BinOpInstr:
                cc.words.append(_binop(BOP_OF_NAME[ins.op], ins.r1, ins.r2, ins.rd))
            elif t is Load:
                cc.words.append(encode(LOAD, rd=ins.rd, rs1=ins.rp))
            elif t is Store:
                cc.fit(3)
                cc.store_sites.append(
                    {"and": cc.addr, "or": cc.addr + 1, "store": cc.addr + 2,
                     "rp": ins.rp, "rs": ins.rs})
                cc.words.append(_binop(BOP_AND, ins.rp, SFI_STORE_AND, SFI_TMP2))
                cc.words.append(_binop(BOP_OR, SFI_TMP2, SFI_STORE_OR, SFI_TMP2))
                cc.words.append(encode(STORE, rs1=SFI_TMP2, rs2=ins.rs))
            elif t is Jal:
                # land the return point on an alignment boundary: internal
                # returns go through the jump mask
                while cc.addr % ALIGN != ALIGN - 1:
                    cc.words.append(NOP_WORD)
                cc.local_fixups.append((len(cc.words), JAL, 0, comp.labels[ins.label]))
                cc.words.append(0)
            elif t is Jump:
                cc.fit(4)
                cc.jump_sites.append(
                    {"const": cc.addr, "and": cc.addr + 1, "or": cc.addr + 2,
                     "jump": cc.addr + 3, "r": ins.r})
                cc.words.append(_const(SFI_TMP3, layout.jump_and_mask()))
                cc.words.append(_binop(BOP_AND, ins.r, SFI_TMP3, SFI_TMP2))
                cc.words.append(_binop(BOP_OR, SFI_TMP2, SFI_JMP_OR, SFI_TMP2))
                cc.words.append(encode(JUMP, rs1=SFI_TMP2))
            elif t is Bnz:
                cc.local_fixups.append((len(cc.words), BNZ, ins.r, comp.labels[ins.label]))
                cc.words.append(0)
            elif t is Call:
                if ins.comp == ENV:
                    cc.cross_fixups.append((len(cc.words), ENV, ins.proc))
                else:
                    cc.cross_fixups.append((len(cc.words), ins.comp, ins.proc))
                cc.words.append(0)  # direct Jal, patched later
                cc.words.append(_const(SFI_STORE_OR, layout.store_or_value(cid)))
                cc.words.append(_const(SFI_JMP_OR, layout.jump_or_value(cid)))
            elif t is Return:
                cc.align()
                cc.pop_sites.append({"const": cc.addr, "sub": cc.addr + 1})
                cc.words.append(_const(SFI_TMP1, 1))
                cc.words.append(_binop(BOP_SUB, SFI_SSP, SFI_TMP1, SFI_SSP))
                cc.words.append(encode(LOAD, rd=SFI_TMP2, rs1=SFI_SSP))
                cc.words.append(encode(JUMP, rs1=SFI_TMP2))
            elif t is AllocInstr:
                cc.words.append(encode(MOV, rd=SFI_TMP2, rs1=ins.rsize))
                cc.words.append(_const(SFI_TMP1, layout.cursor_cell(cid)))
                cc.words.append(encode(JAL, imm=svc_addr))
                cc.words.append(encode(MOV, rd=ins.rd, rs1=SFI_TMP2))
            else:
                raise AssertionError(f"unknown instruction {ins!r}")

    if len(cc.words) > layout.slot_words:
        raise CapacityError(
            f"component {cid}: {len(cc.words)} code words exceed one slot "
            f"({layout.slot_words})")

    # resolve intra-component branch targets
    for pos, op, rs1, target in cc.local_fixups:
        cc.words[pos] = encode(op, rs1=rs1, imm=cc.pos_map[target])
    cc.local_fixups.clear()
    return cc


def sfi_compile(program: MachineProgram, cfg: LayoutConfig | None = None) -> SfiImage:
    """Compile a compartmentalized machine program to an SFI image."""
    cfg = cfg or LayoutConfig()
    layout = _Layout(program, cfg)

    rt = _Asm(layout.code_base(0))
    rt_meta = _build_runtime(rt, layout)
    if len(rt.words) > layout.slot_words:
        raise CapacityError("runtime exceeds its code slot")
    svc_addr = rt.labels["svc_alloc"]

    codes = []
    for comp in program.components:
        codes.append(_translate_component(comp, layout, svc_addr))

    entries: dict[int, tuple[int, str]] = dict(rt_meta["entries"])
    for cc in codes:
        for proc, addr in cc.entry_addrs.items():
            entries[addr] = (cc.cid, proc)
    entry_of = {(c, p): addr for addr, (c, p) in entries.items()}

    memory: dict[int, int] = {}
    for i, word in enumerate(rt.words):
        if word:
            memory[rt.base + i] = word
    for cc, comp in zip(codes, program.components):
        for pos, dst, proc in cc.cross_fixups:
            target = entry_of.get((dst, proc))
            if target is None:
                raise CapacityError(f"unresolved cross call to {dst}.{proc}")
            cc.words[pos] = encode(JAL, imm=target)
        for i, word in enumerate(cc.words):
            if word:
                memory[cc.base + i] = word

    # data blocks
    block_slots: dict[int, dict[int, int]] = {}
    for comp in program.components:
        slots = {}
        for block, cells in comp.buffers.items():
            if len(cells) > layout.slot_words:
                raise CapacityError(
                    f"component {comp.cid}: block {block} exceeds one slot")
            slots[block] = layout.block_slot(block)
            for off, v in enumerate(cells):
                word = _flatten_value(v, layout)
                if word:
                    memory[layout.data_addr(comp.cid, block, off)] = word
        block_slots[comp.cid] = slots
        n_blocks = max(comp.buffers, default=-1) + 1
        cursor = layout.phys(comp.cid, layout.block_slot(n_blocks), 0)
        limit = layout.phys(
            comp.cid, layout.block_slot(n_blocks + layout.alloc_budget), 0)
        memory[layout.cursor_cell(comp.cid)] = cursor
        memory[layout.limit_cell(comp.cid)] = limit

    main_comp, main_proc = program.main
    boot = codes[main_comp - 1].pos_map[
        program.component(main_comp).labels[program.startup_label]]

    initial_regs = [0] * NUM_FLAT_REGS
    initial_regs[R_ONE] = 1
    initial_regs[SFI_STORE_AND] = wrap64(layout.store_and_mask())
    initial_regs[SFI_STORE_OR] = layout.store_or_value(main_comp)
    initial_regs[SFI_JMP_OR] = layout.jump_or_value(main_comp)
    initial_regs[SFI_SSP] = layout.shadow_base

    meta = {
        "offset_bits": layout.ob,
        "component_bits": layout.cb,
        "n_components": len(program.components) + 1,
        "main": [main_comp, main_proc],
        "entries": {str(a): [c, p] for a, (c, p) in sorted(entries.items())},
        "imports": {str(c.cid): sorted([list(i) for i in c.interface.imports])
                    for c in program.components},
        "exports": {str(c.cid): sorted(c.interface.exports)
                    for c in program.components},
        "service": rt_meta["service"],
        "code_ranges": {str(cc.cid): [cc.base, cc.base + len(cc.words)]
                        for cc in codes},
        "runtime_code": [rt.base, rt.base + len(rt.words)],
        "block_slots": {str(c): {str(b): s for b, s in sorted(m.items())}
                        for c, m in block_slots.items()},
        "store_sites": [s for cc in codes for s in cc.store_sites],
        "jump_sites": [s for cc in codes for s in cc.jump_sites],
        "push_sites": [s for cc in codes for s in cc.push_sites],
        "pop_sites": [s for cc in codes for s in cc.pop_sites],
        "tape": {"cursor": layout.tape_cursor, "len": layout.tape_len,
                 "data": layout.tape_data, "capacity": layout.tape_capacity},
        "shadow_base": layout.shadow_base,
        "jump_and_mask": wrap64(layout.jump_and_mask()),
    }
    return SfiImage(memory, tuple(initial_regs), boot, meta)


def _flatten_value(v, layout: _Layout) -> int:
    if v is TOP:
        return 0
    if type(v) is int:
        return v
    if type(v) is Ptr:
        return layout.data_addr(v.comp, v.block, v.off)
    raise SfiFormatError(f"cannot place value {v!r} in flat memory")


# --- simulator ----------------------------------------------------------------


def sfi_run(image: SfiImage, fuel: int, env_tape: tuple[int, ...] = ()
            ) -> tuple[TracePrefix, SfiLog, Outcome]:
    """Run the flat machine, reconstructing events and logging for the checkers."""
    meta = image.meta
    ob = meta["offset_bits"]
    cb = meta["component_bits"]
    comp_mask = (1 << cb) - 1
    entries = {int(a): tuple(v) for a, v in meta["entries"].items()}
    svc_start, svc_end = meta["service"]

    mem = dict(image.memory)
    tape = tuple(env_tape)
    if len(tape) > meta["tape"]["capacity"]:
        raise CapacityError("environment tape exceeds its slot")
    mem[meta["tape"]["cursor"]] = 0
    mem[meta["tape"]["len"]] = len(tape)
    for i, v in enumerate(tape):
        mem[meta["tape"]["data"] + i] = wrap64(v)

    regs = list(image.initial_regs)
    pc = image.entry_addr
    cur = (pc >> ob) & comp_mask
    trace: list = []
    log = SfiLog()

    # stores are masked to data parity, so code words never change during a
    # run: predecode them once
    decoded: dict[int, tuple] = {}
    ranges = list(meta["code_ranges"].values()) + [meta["runtime_code"]]
    for start, end in ranges:
        for addr in range(start, end):
            decoded[addr] = decode(mem.get(addr, 0))

    while fuel > 0:
        fuel -= 1
        ins = decoded.get(pc)
        if ins is None:
            ins = decode(mem.get(pc, 0))
        op, rd, rs1, rs2, imm = ins
        new_pc = pc + 1
        kind = "seq"
        if op == HALT:
            log.halts.append((pc,))
            return TracePrefix(tuple(trace), TERMINATED), log, HALTED
        if op == NOP:
            pass
        elif op == CONST:
            regs[rd] = imm
        elif op == MOV:
            regs[rd] = regs[rs1]
        elif op == BINOP:
            regs[rd] = flat_binop(imm & 0xF, regs[rs1], regs[rs2])
        elif op == LOAD:
            regs[rd] = mem.get(regs[rs1], 0)
        elif op == STORE:
            addr = regs[rs1]
            log.writes.append((pc, cur, addr))
            mem[addr] = regs[rs2]
            if addr in decoded:  # mutated images can self-modify code
                decoded[addr] = decode(regs[rs2])
        elif op == JAL:
            regs[R_RA] = pc + 1
            new_pc = imm
            kind = "jal"
        elif op == JUMP:
            new_pc = regs[rs1]
            kind = "jump"
        elif op == BNZ:
            if regs[rs1] != 0:
                new_pc = imm
                kind = "bnz"

        new_comp = (new_pc >> ob) & comp_mask if new_pc >= 0 else -1
        crossing = new_comp != cur
        if kind != "seq" or crossing:
            log.transfers.append((pc, cur, new_pc, new_comp, kind))
        if crossing:
            entry = entries.get(new_pc)
            if entry is not None:
                owner, proc = entry
                arg = regs[R_COM]
                trace.append(ecall(cur, owner, proc, arg))
            elif svc_start <= new_pc < svc_end or svc_start <= pc < svc_end:
                pass  # allocation service: no event
            else:
                trace.append(eret(cur, new_comp, regs[R_COM]))
            cur = new_comp
        pc = new_pc

    return TracePrefix(tuple(trace)), log, OUT_OF_FUEL


# --- invariant checking -------------------------------------------------------


@dataclass(frozen=True)
class InvariantReport:
    write_isolation: bool       # (1) writes stay in own data memory
    transfer_discipline: bool   # (2) cross transfers only to allowed entries
                                #     or the top return address
    stack_wellformed: bool      # (3) the global stack stays well formed

    def all_hold(self) -> bool:
        return (self.write_isolation and self.transfer_discipline
                and self.stack_wellformed)

    def as_tuple(self) -> tuple[bool, bool, bool]:
        return (self.write_isolation, self.transfer_discipline,
                self.stack_wellformed)


def sfi_check_invariants(log: SfiLog, meta: dict) -> InvariantReport:
    ob = meta["offset_bits"]
    cb = meta["component_bits"]
    entries = {int(a): tuple(v) for a, v in meta["entries"].items()}
    imports = {int(c): {(int(d), p) for d, p in pairs}
               for c, pairs in meta["imports"].items()}
    svc_start, svc_end = meta["service"]

    # Entry sequences push the return address onto the shadow stack from
    # within the caller component's code region; those instrumentation
    # writes belong to the protection machinery (their discipline is what
    # invariant 3 checks) and masked jumps cannot land on them.
    push_pcs = {site["store"] for site in meta["push_sites"]}

    ok_writes = True
    for pc, comp, addr in log.writes:
        if comp == ENV:
            continue  # runtime writes are part of the protection machinery
        if addr < 0:
            ok_writes = False
            continue
        addr_comp = (addr >> ob) & ((1 << cb) - 1)
        parity = (addr >> (ob + cb)) & 1
        if pc in push_pcs and addr_comp == ENV:
            continue
        if addr_comp != comp or parity != 1:
            ok_writes = False

    ok_transfers = True
    ok_stack = True
    shadow: list[int] = []
    for frm, fc, to, tc, kind in log.transfers:
        if tc == fc:
            continue
        in_service = (svc_start <= to < svc_end) or (svc_start <= frm < svc_end)
        if in_service:
            continue
        entry = entries.get(to)
        if entry is not None:
            owner, proc = entry
            if fc != ENV and (owner, proc) not in imports.get(fc, set()):
                ok_transfers = False
            shadow.append(frm + 1)
        else:
            if shadow and shadow[-1] == to:
                shadow.pop()
            else:
                ok_stack = False
                if fc != ENV:
                    ok_transfers = False
                if shadow:
                    shadow.pop()
    return InvariantReport(ok_writes, ok_transfers, ok_stack)


# --- image persistence --------------------------------------------------------

_MAGIC = b"CSFIMG"
_VERSION = 1


def save_sfi_image(image: SfiImage) -> bytes:
    doc = {
        "memory": {str(a): w for a, w in sorted(image.memory.items())},
        "initial_regs": list(image.initial_regs),
        "entry_addr": image.entry_addr,
        "meta": image.meta,
    }
    return _MAGIC + bytes([_VERSION]) + zlib.compress(
        json.dumps(doc, sort_keys=True).encode())


def load_sfi_image(data: bytes) -> SfiImage:
    if data[: len(_MAGIC)] != _MAGIC:
        raise SfiFormatError("bad magic")
    if len(data) < len(_MAGIC) + 1 or data[len(_MAGIC)] != _VERSION:
        raise SfiFormatError("unsupported version")
    try:
        doc = json.loads(zlib.decompress(data[len(_MAGIC) + 1:]))
        return SfiImage(
            memory={int(a): w for a, w in doc["memory"].items()},
            initial_regs=tuple(doc["initial_regs"]),
            entry_addr=doc["entry_addr"],
            meta=doc["meta"],
        )
    except SfiFormatError:
        raise
    except Exception as exc:
        raise SfiFormatError(f"corrupt image: {exc}") from exc


def render_sfi_code(image: SfiImage) -> str:
    """Disassembly of all code regions, for debugging."""
    out = []
    ranges = dict(image.meta["code_ranges"])
    ranges["runtime"] = image.meta["runtime_code"]
    entries = {int(a): tuple(v) for a, v in image.meta["entries"].items()}
    for name in sorted(ranges, key=str):
        start, end = ranges[name]
        out.append(f"-- code {name} [{start}, {end})")
        for addr in range(start, end):
            word = image.memory.get(addr, 0)
            mark = ""
            if addr in entries:
                mark = f"  <- entry {entries[addr][0]}.{entries[addr][1]}"
            out.append(f"  {addr:8} {render_word(word)}{mark}")
    return "\n".join(out)
