"""Bare-metal RISC target shared by both back ends.

Flat memory is a sparse map from integer addresses to 64-bit words; every
word is either data or an encoded instruction.  The instruction set is the
compartmentalized machine's minus Call/Return/Alloc.  An all-zero word
decodes to Halt, so falling into unwritten memory stops the machine.

Word layout: opcode[63:56] rd[55:52] rs1[51:48] rs2[47:44] imm[43:0],
with the binop subcode stored in imm's low 4 bits (BinOp carries no
immediate).  The immediate is 44-bit two's complement; Const values that
do not fit are synthesized from two loads and an add by the back ends.

The register file extends the six base registers with seven reserved for
instrumentation and runtime use.
"""

from __future__ import annotations

from .words import wrap64

# Base registers keep their compartmentalized-machine indices.
R_ONE, R_COM, R_SP, R_RA, R_AUX1, R_AUX2 = range(6)
# Reserved registers.
SFI_STORE_AND = 6   # AND mask clearing the component field of a store target
SFI_STORE_OR = 7    # OR value forcing own component + data parity
SFI_JMP_OR = 8      # OR value forcing own component (code parity stays 0)
SFI_SSP = 9         # shadow stack pointer
SFI_TMP1 = 10
SFI_TMP2 = 11
SFI_TMP3 = 12

NUM_FLAT_REGS = 13
FLAT_REG_NAMES = (
    "R_ONE", "R_COM", "R_SP", "R_RA", "R_AUX1", "R_AUX2",
    "S_AND", "S_OR", "J_OR", "SSP", "TMP1", "TMP2", "TMP3",
)

# Opcodes; 0 must be Halt.
HALT, NOP, CONST, MOV, BINOP, LOAD, STORE, JAL, JUMP, BNZ = range(10)
OPCODE_NAMES = ("Halt", "Nop", "Const", "Mov", "BinOp", "Load", "Store",
                "Jal", "Jump", "Bnz")

BOP_ADD, BOP_SUB, BOP_MUL, BOP_EQ, BOP_LT, BOP_LE, BOP_AND, BOP_OR = range(8)
BOP_OF_NAME = {"+": BOP_ADD, "-": BOP_SUB, "*": BOP_MUL, "=": BOP_EQ,
               "<": BOP_LT, "<=": BOP_LE, "&": BOP_AND, "|": BOP_OR}
BOP_NAMES = ("+", "-", "*", "=", "<", "<=", "&", "|")

IMM_BITS = 44
IMM_MIN = -(1 << (IMM_BITS - 1))
IMM_MAX = (1 << (IMM_BITS - 1)) - 1
_IMM_MASK = (1 << IMM_BITS) - 1
_U64 = (1 << 64) - 1


def imm_fits(value: int) -> bool:
    return IMM_MIN <= value <= IMM_MAX


def encode(op: int, rd: int = 0, rs1: int = 0, rs2: int = 0, imm: int = 0) -> int:
    if not imm_fits(imm):
        raise ValueError(f"immediate {imm} out of range")
    return ((op << 56) | (rd << 52) | (rs1 << 48) | (rs2 << 44)
            | (imm & _IMM_MASK))


def decode(word: int) -> tuple[int, int, int, int, int]:
    """(op, rd, rs1, rs2, imm); anything unintelligible decodes as Halt."""
    word &= _U64
    op = (word >> 56) & 0xFF
    if op >= len(OPCODE_NAMES):
        return HALT, 0, 0, 0, 0
    rd = (word >> 52) & 0xF
    rs1 = (word >> 48) & 0xF
    rs2 = (word >> 44) & 0xF
    imm = word & _IMM_MASK
    if imm >> (IMM_BITS - 1):
        imm -= 1 << IMM_BITS
    return op, rd, rs1, rs2, imm


def flat_binop(sub: int, a: int, b: int) -> int:
    if sub == BOP_ADD:
        return wrap64(a + b)
    if sub == BOP_SUB:
        return wrap64(a - b)
    if sub == BOP_MUL:
        return wrap64(a * b)
    if sub == BOP_EQ:
        return 1 if a == b else 0
    if sub == BOP_LT:
        return 1 if a < b else 0
    if sub == BOP_LE:
        return 1 if a <= b else 0
    if sub == BOP_AND:
        return wrap64(a & b)
    if sub == BOP_OR:
        return wrap64(a | b)
    return 0


class FlatAsm:
    """Flat-word emitter with labels and absolute branch fixups."""

    def __init__(self, base: int):
        self.base = base
        self.words: list[int] = []
        self.labels: dict[str, int] = {}
        self.fixups: list[tuple[int, str, int, int]] = []  # pos, label, op, rs1

    @property
    def addr(self) -> int:
        return self.base + len(self.words)

    def here(self, label: str):
        self.labels[label] = self.addr

    def emit(self, word: int):
        self.words.append(word)

    def jump_to(self, label: str, cond_reg: int):
        """Bnz to a label (unconditional when cond_reg holds nonzero)."""
        self.fixups.append((len(self.words), label, BNZ, cond_reg))
        self.words.append(0)

    def resolve(self):
        for pos, label, op, rs1 in self.fixups:
            self.words[pos] = encode(op, rs1=rs1, imm=self.labels[label])
        self.fixups.clear()


def emit_const_value(out: list[int], rd: int, value: int):
    """Const of an arbitrary 64-bit value, synthesized when too wide."""
    if imm_fits(value):
        out.append(encode(CONST, rd=rd, imm=value))
        return
    hi, lo = value >> 22, value & ((1 << 22) - 1)
    out.append(encode(CONST, rd=rd, imm=hi))
    out.append(encode(CONST, rd=SFI_TMP3, imm=1 << 22))
    out.append(encode(BINOP, rd=rd, rs1=rd, rs2=SFI_TMP3, imm=BOP_MUL))
    out.append(encode(CONST, rd=SFI_TMP3, imm=lo))
    out.append(encode(BINOP, rd=rd, rs1=rd, rs2=SFI_TMP3, imm=BOP_ADD))


def render_word(word: int) -> str:
    op, rd, rs1, rs2, imm = decode(word)
    n = FLAT_REG_NAMES
    if op == CONST:
        return f"Const {imm} -> {n[rd]}"
    if op == MOV:
        return f"Mov {n[rs1]} -> {n[rd]}"
    if op == BINOP:
        return f"BinOp {n[rs1]} {BOP_NAMES[imm & 0xF]} {n[rs2]} -> {n[rd]}"
    if op == LOAD:
        return f"Load *{n[rs1]} -> {n[rd]}"
    if op == STORE:
        return f"Store *{n[rs1]} <- {n[rs2]}"
    if op == JAL:
        return f"Jal {imm}"
    if op == JUMP:
        return f"Jump {n[rs1]}"
    if op == BNZ:
        return f"Bnz {n[rs1]} {imm}"
    return OPCODE_NAMES[op]
