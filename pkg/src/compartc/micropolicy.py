"""Tag-based reference monitor back end.

Every memory word carries a tag (value tag, owner color, entry colors) and
every register a value tag; the program counter carries the current
cross-component call depth.  A pure monitor function inspects the opcode
and the tags of the program counter, the current and next instructions,
and the operands, and either allows the step (possibly rewriting tags) or
stops the machine with a violation.

Return addresses created by cross-color Jal are linear capabilities
``Ret(n)``: moved, never copied, by Mov/Load/Store, usable exactly once by
a Jump that is at depth n+1, which destroys them.  Cross-color loads are
allowed but the loaded destination is stripped of any capability.  Stores
require the written cell to be owned by the executing color.  Instruction
fetch may cross colors only through an entry-point Jal or a capability
Jump, so running past the end of a code region stops the machine.

Code generation maps Call and Return onto Jal and Jump; allocation is a
service the simulator performs when Jal targets a reserved address,
tagging the fresh cells with the caller's color and answering in R_COM.
"""

from __future__ import annotations

import json
import zlib
from bisect import bisect_right
from dataclasses import dataclass

from .flat import (
    BINOP, BNZ, CONST, FlatAsm, HALT, JAL, JUMP, LOAD, MOV, NOP,
    NUM_FLAT_REGS, R_COM, R_ONE, R_RA, R_SP, SFI_TMP1, SFI_TMP2, SFI_TMP3,
    STORE, BOP_ADD, BOP_LT, BOP_OF_NAME, BOP_SUB, decode, emit_const_value,
    encode, flat_binop,
)
from .machine import (
    AllocInstr, BinOpInstr, Bnz, Call, Const, DataLabel, Halt, Jal, Jump,
    Load, MachineProgram, Mov, Nop, Return, Store,
)
from .trace import (
    HALTED, OUT_OF_FUEL, Outcome, TERMINATED, TracePrefix, Undef, ecall, eret,
)
from .values import TOP, Ptr
from .words import wrap64

ENV = 0
NO_COLOR = -1

CODE_AREA = 0          # offsets within one component's address stripe
DATA_AREA = 1 << 26
ALLOC_AREA = 2 << 26
COMP_SHIFT = 28        # component stripe: color c owns [c<<28, (c+1)<<28)
BLOCK_STRIDE = 1 << 20
ALLOC_GAP = 16

ALLOC_SVC_OFFSET = 0x1000  # reserved Jal target in the runtime code area


class MpFormatError(Exception):
    pass


class MpCapacityError(Exception):
    pass


class LinearityError(AssertionError):
    """A level has two live return capabilities: the monitor is broken."""


# --- the monitor --------------------------------------------------------------

KEEP = "keep"  # decision field: leave the tag alone
BOT = None     # the bottom value tag; Ret(n) is the integer n


@dataclass(frozen=True)
class Allow:
    pc_level: int
    d: object = KEEP    # destination register value tag
    s: object = KEEP    # source register value tag
    m: object = KEEP    # touched memory cell value tag
    ra: object = KEEP   # R_RA value tag
    p: object = KEEP    # jump operand value tag


@dataclass(frozen=True)
class ViolationStop:
    rule: str


def mp_monitor(op: int, pc_level: int, ci: tuple, ni: tuple | None,
               operands: tuple) -> Allow | ViolationStop:
    """Decide one instruction from tags alone.

    ci and ni are (value tag, color, entry colors) for the current and
    next instruction words; operands carries the operand tags the opcode
    consumes.  Pure: equal inputs give equal decisions.
    """
    color = ci[1]
    if op in (NOP, CONST, BINOP, MOV, LOAD, STORE, BNZ):
        if ni[1] != color:
            return ViolationStop("fetch-cross-color")
    if op in (NOP, BNZ, HALT):
        return Allow(pc_level)
    if op in (CONST, BINOP):
        return Allow(pc_level, d=BOT)
    if op == MOV:
        (s_tag,) = operands
        return Allow(pc_level, d=s_tag, s=BOT)
    if op == LOAD:
        (m_tag,) = operands
        if m_tag[1] == color:
            # moving load: the capability leaves the cell
            return Allow(pc_level, d=m_tag[0], m=BOT)
        return Allow(pc_level, d=BOT)  # copy, stripped of any capability
    if op == STORE:
        m_tag, s_tag = operands
        if m_tag[1] != color:
            return ViolationStop("store-cross-color")
        return Allow(pc_level, m=s_tag, s=BOT)
    if op == JAL:
        if ni[1] == color:
            return Allow(pc_level, ra=BOT)
        if color not in ni[2]:
            return ViolationStop("call-not-an-entry")
        return Allow(pc_level + 1, ra=pc_level)
    if op == JUMP:
        (p_tag,) = operands
        if p_tag is not BOT:
            if pc_level != p_tag + 1:
                return ViolationStop("return-level-mismatch")
            return Allow(p_tag, p=BOT)
        if ni[1] != color:
            return ViolationStop("jump-cross-color")
        return Allow(pc_level)
    return ViolationStop("unknown-opcode")


# --- image --------------------------------------------------------------------


@dataclass
class MpImage:
    memory: dict[int, int]
    initial_regs: tuple[int, ...]
    entry_addr: int
    meta: dict

    def copy(self) -> "MpImage":
        return MpImage(dict(self.memory), self.initial_regs, self.entry_addr,
                       json.loads(json.dumps(self.meta)))


def _comp_base(comp: int) -> int:
    return comp << COMP_SHIFT


def _block_addr(comp: int, block: int, off: int, block_index: dict) -> int:
    return _comp_base(comp) + DATA_AREA + block_index[block] * BLOCK_STRIDE + off


def mp_compile(program: MachineProgram) -> MpImage:
    """Lay the program out flat and tag it for the monitor."""
    importers: dict[tuple[int, str], set[int]] = {}
    for comp in program.components:
        for dst, proc in comp.interface.imports:
            importers.setdefault((dst, proc), set()).add(comp.cid)

    memory: dict[int, int] = {}
    regions: list[list] = []   # [start, end, color]
    entries: dict[int, tuple[int, str]] = {}
    entry_colors: dict[int, list[int]] = {}
    svc_addr = ALLOC_SVC_OFFSET

    # runtime: environment stubs, color 0
    rt = FlatAsm(_comp_base(ENV) + CODE_AREA)
    tape_cursor = _comp_base(ENV) + DATA_AREA
    tape_len = tape_cursor + 1
    tape_data = tape_cursor + 2

    for proc in ("read", "write"):
        entry = rt.addr
        entries[entry] = (ENV, proc)
        entry_colors[entry] = sorted(importers.get((ENV, proc), ()))
        if proc == "read":
            rt.emit(encode(CONST, rd=SFI_TMP1, imm=tape_cursor))
            rt.emit(encode(LOAD, rd=SFI_TMP2, rs1=SFI_TMP1))
            rt.emit(encode(CONST, rd=SFI_TMP3, imm=tape_len))
            rt.emit(encode(LOAD, rd=SFI_TMP3, rs1=SFI_TMP3))
            rt.emit(encode(BINOP, rd=SFI_TMP3, rs1=SFI_TMP2, rs2=SFI_TMP3, imm=BOP_LT))
            rt.jump_to(f"{proc}_have", SFI_TMP3)
            rt.emit(encode(CONST, rd=R_COM, imm=0))
            rt.emit(encode(CONST, rd=SFI_TMP3, imm=1))
            rt.jump_to(f"{proc}_done", SFI_TMP3)
            rt.here(f"{proc}_have")
            rt.emit(encode(CONST, rd=SFI_TMP3, imm=tape_data))
            rt.emit(encode(BINOP, rd=SFI_TMP3, rs1=SFI_TMP3, rs2=SFI_TMP2, imm=BOP_ADD))
            rt.emit(encode(LOAD, rd=R_COM, rs1=SFI_TMP3))
            rt.here(f"{proc}_done")
            rt.emit(encode(CONST, rd=SFI_TMP3, imm=1))
            rt.emit(encode(BINOP, rd=SFI_TMP2, rs1=SFI_TMP2, rs2=SFI_TMP3, imm=BOP_ADD))
            rt.emit(encode(CONST, rd=SFI_TMP1, imm=tape_cursor))
            rt.emit(encode(STORE, rs1=SFI_TMP1, rs2=SFI_TMP2))
        else:
            rt.emit(encode(CONST, rd=R_COM, imm=0))
        rt.emit(encode(JUMP, rs1=R_RA))
    rt.resolve()
    if len(rt.words) > ALLOC_SVC_OFFSET:
        raise MpCapacityError("runtime stubs overlap the service address")
    for i, w in enumerate(rt.words):
        if w:
            memory[rt.base + i] = w
    regions.append([rt.base, rt.base + len(rt.words), ENV])
    regions.append([tape_cursor, tape_data + (BLOCK_STRIDE - 2), ENV])

    # components
    alloc_areas: dict[int, int] = {}
    block_slots_meta: dict[str, dict] = {}
    cross_sites: list[tuple[int, int, str]] = []  # (word addr, dst comp, proc)
    boot_addr: int | None = None
    mc, main_proc = program.main
    for comp in program.components:
        cid = comp.cid
        block_ids = sorted(set(comp.buffers))
        block_index = {b: i for i, b in enumerate(block_ids)}
        asm = FlatAsm(_comp_base(cid) + CODE_AREA)
        pos_map: dict[tuple[int, int], int] = {}
        entry_positions = {comp.labels[l]: p for p, l in comp.entry_points.items()}

        for block in sorted(comp.code):
            for off, ins in enumerate(comp.code[block]):
                pos_map[(block, off)] = asm.addr
                t = type(ins)
                if t is Nop:
                    asm.emit(encode(NOP))
                elif t is Halt:
                    asm.emit(encode(HALT))
                elif t is Const:
                    if type(ins.imm) is DataLabel:
                        addr = _block_addr(cid, ins.imm.block, ins.imm.off, block_index)
                        asm.emit(encode(CONST, rd=ins.rd, imm=addr))
                    else:
                        emit_const_value(asm.words, ins.rd, wrap64(ins.imm))
                elif t is Mov:
                    asm.emit(encode(MOV, rd=ins.rd, rs1=ins.rs))
                elif t is BinOpInstr:
                    asm.emit(encode(BINOP, rd=ins.rd, rs1=ins.r1, rs2=ins.r2,
                                    imm=BOP_OF_NAME[ins.op]))
                elif t is Load:
                    asm.emit(encode(LOAD, rd=ins.rd, rs1=ins.rp))
                elif t is Store:
                    asm.emit(encode(STORE, rs1=ins.rp, rs2=ins.rs))
                elif t is Jal:
                    asm.fixups.append((len(asm.words), f"L{ins.label}", JAL, 0))
                    asm.emit(0)
                elif t is Jump:
                    asm.emit(encode(JUMP, rs1=ins.r))
                elif t is Bnz:
                    asm.fixups.append((len(asm.words), f"L{ins.label}", BNZ, ins.r))
                    asm.emit(0)
                elif t is Call:
                    cross_sites.append((asm.addr, ins.comp, ins.proc))
                    asm.emit(0)
                elif t is Return:
                    asm.emit(encode(JUMP, rs1=R_RA))
                elif t is AllocInstr:
                    # spill R_COM, pass the size in R_COM, service answers
                    # in R_COM, restore
                    asm.emit(encode(STORE, rs1=R_SP, rs2=R_COM))
                    asm.emit(encode(CONST, rd=SFI_TMP1, imm=1))
                    asm.emit(encode(BINOP, rd=R_SP, rs1=R_SP, rs2=SFI_TMP1, imm=BOP_ADD))
                    asm.emit(encode(MOV, rd=R_COM, rs1=ins.rsize))
                    asm.emit(encode(JAL, imm=svc_addr))
                    asm.emit(encode(MOV, rd=ins.rd, rs1=R_COM))
                    asm.emit(encode(CONST, rd=SFI_TMP1, imm=1))
                    asm.emit(encode(BINOP, rd=R_SP, rs1=R_SP, rs2=SFI_TMP1, imm=BOP_SUB))
                    asm.emit(encode(LOAD, rd=R_COM, rs1=R_SP))
                else:
                    raise AssertionError(f"unknown instruction {ins!r}")

        for label, loc in comp.labels.items():
            asm.labels[f"L{label}"] = pos_map[loc]
        asm.resolve()
        if len(asm.words) > DATA_AREA:
            raise MpCapacityError(f"component {cid} code exceeds its area")
        for i, w in enumerate(asm.words):
            if w:
                memory[asm.base + i] = w
        regions.append([asm.base, asm.base + len(asm.words), cid])

        for pos, proc in entry_positions.items():
            addr = pos_map[pos]
            entries[addr] = (cid, proc)
            entry_colors[addr] = sorted(importers.get((cid, proc), ()))
        if cid == mc:
            boot_addr = pos_map[comp.labels[program.startup_label]]

        # data blocks
        slots = {}
        for block, cells in comp.buffers.items():
            if block in comp.growable:
                capacity = BLOCK_STRIDE
            else:
                capacity = len(cells)
            if len(cells) > BLOCK_STRIDE or capacity > BLOCK_STRIDE:
                raise MpCapacityError(f"component {cid} block {block} too large")
            base = _block_addr(cid, block, 0, block_index)
            slots[str(block)] = base
            regions.append([base, base + capacity, cid])
            for off, v in enumerate(cells):
                w = _flatten(v, cid, block_index)
                if w:
                    memory[base + off] = w
        block_slots_meta[str(cid)] = slots
        alloc_areas[cid] = _comp_base(cid) + ALLOC_AREA

    # cross calls were emitted as zero words; fill in the entry targets now
    # that every component is placed
    entry_of = {(c, p): a for a, (c, p) in entries.items()}
    for addr, dst, proc in cross_sites:
        target = entry_of.get((dst, proc))
        if target is None:
            raise MpCapacityError(f"unresolved call to {dst}.{proc}")
        memory[addr] = encode(JAL, imm=target)

    initial_regs = [0] * NUM_FLAT_REGS
    initial_regs[R_ONE] = 1

    meta = {
        "main": [mc, main_proc],
        "entries": {str(a): [c, p] for a, (c, p) in sorted(entries.items())},
        "entry_colors": {str(a): cs for a, cs in sorted(entry_colors.items())},
        "regions": sorted(regions),
        "alloc_svc": svc_addr,
        "alloc_areas": {str(c): a for c, a in sorted(alloc_areas.items())},
        "tape": {"cursor": tape_cursor, "len": tape_len, "data": tape_data,
                 "capacity": BLOCK_STRIDE - 2},
        "comp_shift": COMP_SHIFT,
    }
    if boot_addr is None:
        raise MpFormatError("startup label not found in the main component")
    return MpImage(memory, tuple(initial_regs), boot_addr, meta)


def _flatten(v, cid: int, block_index: dict) -> int:
    if v is TOP:
        return 0
    if type(v) is int:
        return v
    if type(v) is Ptr:
        return _block_addr(v.comp, v.block, v.off, block_index)
    raise MpFormatError(f"cannot place value {v!r} in flat memory")


# --- simulator ----------------------------------------------------------------


class _ColorMap:
    def __init__(self, regions):
        merged = sorted([tuple(r) for r in regions])
        self.starts = [r[0] for r in merged]
        self.regions = merged
        self.dynamic: list[tuple[int, int, int]] = []

    def color(self, addr: int) -> int:
        i = bisect_right(self.starts, addr) - 1
        if i >= 0:
            s, e, c = self.regions[i]
            if s <= addr < e:
                return c
        for s, e, c in self.dynamic:
            if s <= addr < e:
                return c
        return NO_COLOR


def _scan_linearity(reg_tags: list, vtags: dict, level: int):
    seen: set[int] = set()
    for tag in reg_tags:
        if tag is not BOT:
            if tag in seen:
                raise LinearityError(f"two live Ret({tag}) capabilities")
            seen.add(tag)
    for tag in vtags.values():
        if tag is not BOT:
            if tag in seen:
                raise LinearityError(f"two live Ret({tag}) capabilities")
            seen.add(tag)


def mp_run(image: MpImage, fuel: int, env_tape: tuple[int, ...] = (),
           debug_linearity: bool = False, use_cache: bool = True
           ) -> tuple[TracePrefix, Outcome]:
    """Step the tagged machine under the monitor."""
    meta = image.meta
    entries = {int(a): tuple(v) for a, v in meta["entries"].items()}
    entry_colors = {int(a): frozenset(v) for a, v in meta["entry_colors"].items()}
    colors = _ColorMap(meta["regions"])
    svc = meta["alloc_svc"]
    alloc_cursor = {int(c): a for c, a in meta["alloc_areas"].items()}

    mem = dict(image.memory)
    if len(env_tape) > meta["tape"]["capacity"]:
        raise MpCapacityError("environment tape too long")
    mem[meta["tape"]["cursor"]] = 0
    mem[meta["tape"]["len"]] = len(env_tape)
    for i, v in enumerate(env_tape):
        mem[meta["tape"]["data"] + i] = wrap64(v)

    regs = list(image.initial_regs)
    reg_tags: list = [BOT] * NUM_FLAT_REGS
    vtags: dict[int, int] = {}
    pc = image.entry_addr
    level = 0
    trace: list = []
    cache: dict | None = {} if use_cache else None

    # code words only change through (undefined) self-modifying stores;
    # predecode the image and re-decode stored-to addresses
    decoded: dict[int, tuple] = {addr: decode(word)
                                 for addr, word in image.memory.items()}
    empty_colors = frozenset()

    def mem_tag(addr: int) -> tuple:
        return (vtags.get(addr, BOT), colors.color(addr),
                entry_colors.get(addr, empty_colors))

    def stop(outcome: Outcome):
        term = None
        if outcome.kind == "halted":
            term = TERMINATED
        elif outcome.kind == "violation":
            term = Undef(outcome.component)
        return TracePrefix(tuple(trace), term), outcome

    while fuel > 0:
        fuel -= 1
        ins = decoded.get(pc)
        if ins is None:
            ins = decode(mem.get(pc, 0))
        op, rd, rs1, rs2, imm = ins
        ci = mem_tag(pc)

        if op == HALT:
            return stop(HALTED)

        if op == JAL and imm == svc:
            # allocation service: fresh cells get the caller's color
            size = max(1, regs[R_COM])
            base = alloc_cursor[ci[1]]
            alloc_cursor[ci[1]] = base + size + ALLOC_GAP
            colors.dynamic.append((base, base + size, ci[1]))
            regs[R_COM] = base
            reg_tags[R_COM] = BOT
            pc += 1
            continue

        # candidate next pc and operand tags
        if op == JAL:
            next_pc = imm
        elif op == JUMP:
            next_pc = regs[rs1]
        elif op == BNZ:
            next_pc = imm if regs[rs1] != 0 else pc + 1
        else:
            next_pc = pc + 1
        ni = mem_tag(next_pc)

        maddr = regs[rs1] if op in (LOAD, STORE) else None
        if op == MOV:
            operands: tuple = (reg_tags[rs1],)
        elif op == LOAD:
            operands = (mem_tag(maddr),)
        elif op == STORE:
            operands = (mem_tag(maddr), reg_tags[rs2])
        elif op == JUMP:
            operands = (reg_tags[rs1],)
        else:
            operands = ()

        if cache is not None:
            key = (op, level, ci, ni, operands)
            decision = cache.get(key)
            if decision is None:
                decision = mp_monitor(op, level, ci, ni, operands)
                cache[key] = decision
        else:
            decision = mp_monitor(op, level, ci, ni, operands)

        if type(decision) is ViolationStop:
            return stop(Outcome("violation", ci[1], decision.rule))

        # events are reconstructed at cross-color transfers
        if op == JAL and ni[1] != ci[1]:
            owner, proc = entries.get(next_pc, (ni[1], "?"))
            trace.append(ecall(ci[1], owner, proc, regs[R_COM]))
        elif op == JUMP and operands[0] is not BOT and ni[1] != ci[1]:
            trace.append(eret(ci[1], ni[1], regs[R_COM]))

        # value semantics
        if op == CONST:
            regs[rd] = imm
        elif op == MOV:
            regs[rd] = regs[rs1]
        elif op == BINOP:
            regs[rd] = flat_binop(imm & 0xF, regs[rs1], regs[rs2])
        elif op == LOAD:
            regs[rd] = mem.get(maddr, 0)
        elif op == STORE:
            mem[maddr] = regs[rs2]
            if maddr in decoded:  # undefined programs may self-modify code
                decoded[maddr] = decode(regs[rs2])
        elif op == JAL:
            regs[R_RA] = pc + 1

        # tag semantics
        level = decision.pc_level
        if decision.s is not KEEP:
            src = rs1 if op == MOV else rs2
            reg_tags[src] = decision.s
        if decision.d is not KEEP:
            reg_tags[rd] = decision.d
        if decision.m is not KEEP:
            if decision.m is BOT:
                vtags.pop(maddr, None)
            else:
                vtags[maddr] = decision.m
        if decision.ra is not KEEP:
            reg_tags[R_RA] = decision.ra
        if decision.p is not KEEP:
            reg_tags[rs1] = decision.p

        pc = next_pc
        if debug_linearity:
            _scan_linearity(reg_tags, vtags, level)

    return TracePrefix(tuple(trace)), OUT_OF_FUEL


# --- persistence --------------------------------------------------------------

_MAGIC = b"CMPIMG"
_VERSION = 1


def save_mp_image(image: MpImage) -> bytes:
    doc = {
        "memory": {str(a): w for a, w in sorted(image.memory.items())},
        "initial_regs": list(image.initial_regs),
        "entry_addr": image.entry_addr,
        "meta": image.meta,
    }
    return _MAGIC + bytes([_VERSION]) + zlib.compress(
        json.dumps(doc, sort_keys=True).encode())


def load_mp_image(data: bytes) -> MpImage:
    if data[: len(_MAGIC)] != _MAGIC:
        raise MpFormatError("bad magic")
    if len(data) < len(_MAGIC) + 1 or data[len(_MAGIC)] != _VERSION:
        raise MpFormatError("unsupported version")
    try:
        doc = json.loads(zlib.decompress(data[len(_MAGIC) + 1:]))
        return MpImage(
            memory={int(a): w for a, w in doc["memory"].items()},
            initial_regs=tuple(doc["initial_regs"]),
            entry_addr=doc["entry_addr"],
            meta=doc["meta"],
        )
    except MpFormatError:
        raise
    except Exception as exc:
        raise MpFormatError(f"corrupt image: {exc}") from exc
