import pytest

from compartc.compile import compile_program
from compartc.flat import (
    BINOP, BNZ, CONST, HALT, JAL, JUMP, LOAD, MOV, NOP, R_AUX1, R_COM,
    R_RA, STORE, encode,
)
from compartc.gen import GenConfig, gen_program
from compartc.machine import mrun
from compartc.micropolicy import (
    Allow, BOT, KEEP, LinearityError, MpFormatError, MpImage,
    ViolationStop, load_mp_image, mp_compile, mp_monitor, mp_run,
    save_mp_image,
)
from compartc.parser import parse_source
from compartc.trace import prefix_leq


def tag(color, vtag=BOT, entry=()):
    return (vtag, color, frozenset(entry))


class TestMonitorRules:
    """One test per rule of the monitor table."""

    def test_nop_requires_same_color_fetch(self):
        assert type(mp_monitor(NOP, 0, tag(1), tag(1), ())) is Allow
        v = mp_monitor(NOP, 0, tag(1), tag(2), ())
        assert type(v) is ViolationStop and v.rule == "fetch-cross-color"

    def test_const_and_binop_clear_destination(self):
        d = mp_monitor(CONST, 0, tag(1), tag(1), ())
        assert d.d is BOT
        d = mp_monitor(BINOP, 0, tag(1), tag(1), ())
        assert d.d is BOT

    def test_mov_moves_the_tag(self):
        d = mp_monitor(MOV, 2, tag(1), tag(1), (1,))  # source holds Ret(1)
        assert d.d == 1 and d.s is BOT

    def test_load_same_color_moves_capability_out_of_memory(self):
        d = mp_monitor(LOAD, 2, tag(1), tag(1), (tag(1, vtag=0),))
        assert d.d == 0 and d.m is BOT

    def test_load_cross_color_copies_without_capability(self):
        d = mp_monitor(LOAD, 2, tag(1), tag(1), (tag(2, vtag=0),))
        assert d.d is BOT and d.m is KEEP

    def test_store_same_color_moves_capability_into_memory(self):
        d = mp_monitor(STORE, 4, tag(1), tag(1), (tag(1), 3))
        assert d.m == 3 and d.s is BOT

    def test_store_cross_color_violation(self):
        v = mp_monitor(STORE, 0, tag(1), tag(1), (tag(2), BOT))
        assert type(v) is ViolationStop and v.rule == "store-cross-color"

    def test_bnz_requires_same_color(self):
        assert type(mp_monitor(BNZ, 0, tag(1), tag(1), ())) is Allow
        assert type(mp_monitor(BNZ, 0, tag(1), tag(2), ())) is ViolationStop

    def test_jal_same_color_plain(self):
        d = mp_monitor(JAL, 3, tag(1), tag(1), ())
        assert d.pc_level == 3 and d.ra is BOT

    def test_jal_cross_color_entry(self):
        d = mp_monitor(JAL, 3, tag(1), tag(2, entry={1}), ())
        assert d.pc_level == 4 and d.ra == 3

    def test_jal_cross_color_denied_without_entry_color(self):
        v = mp_monitor(JAL, 3, tag(1), tag(2, entry={5}), ())
        assert type(v) is ViolationStop and v.rule == "call-not-an-entry"

    def test_jump_with_capability_at_matching_level(self):
        d = mp_monitor(JUMP, 4, tag(2), tag(1), (3,))
        assert d.pc_level == 3 and d.p is BOT

    def test_jump_with_capability_at_wrong_level(self):
        v = mp_monitor(JUMP, 2, tag(2), tag(1), (3,))
        assert type(v) is ViolationStop and v.rule == "return-level-mismatch"

    def test_jump_without_capability_stays_in_color(self):
        assert type(mp_monitor(JUMP, 0, tag(1), tag(1), (BOT,))) is Allow
        v = mp_monitor(JUMP, 0, tag(1), tag(2), (BOT,))
        assert type(v) is ViolationStop and v.rule == "jump-cross-color"

    def test_purity(self):
        args = (STORE, 4, tag(1), tag(1), (tag(1), 3))
        assert mp_monitor(*args) == mp_monitor(*args)


class TestEntryTagging:
    def test_fig6_entry_colors(self, fig6_program):
        machine = compile_program(fig6_program)
        image = mp_compile(machine)
        by_proc = {tuple(v): int(a) for a, v in image.meta["entries"].items()}
        p_entry = by_proc[(2, "p")]
        assert image.meta["entry_colors"][str(p_entry)] == [1]
        main_entry = by_proc[(1, "mainP")]
        assert image.meta["entry_colors"][str(main_entry)] == [2]

    def test_non_entry_words_carry_no_entry_colors(self, fig6_program):
        image = mp_compile(compile_program(fig6_program))
        entries = set(image.meta["entry_colors"])
        # entry_colors is sparse: exactly the entry points
        assert entries == set(image.meta["entries"])

    def test_two_importers(self):
        program = parse_source("""
component A { import C.f; proc main(_) { C.f(1); exit } }
component B { import C.f; export g; proc g(_) { C.f(2) } }
component C { export f; proc f(_) { 0 } }
""")
        image = mp_compile(compile_program(program))
        by_proc = {tuple(v): int(a) for a, v in image.meta["entries"].items()}
        f_entry = by_proc[(3, "f")]
        assert image.meta["entry_colors"][str(f_entry)] == [1, 2]


class TestRuns:
    def test_defined_programs_agree(self):
        checked = 0
        for seed in range(60):
            src, machine = gen_program(GenConfig(seed=seed))
            t_m, out_m = mrun(machine, 20_000, env_tape=src.env_tape)
            image = mp_compile(machine)
            t_t, out_t = mp_run(image, 400_000, src.env_tape)
            if out_m.kind != "halted" or out_t.kind == "out_of_fuel":
                continue
            assert t_t == t_m, seed
            checked += 1
        assert checked > 20

    def test_undefined_programs_extend_or_blame_consistently(self):
        for seed in range(60):
            src, machine = gen_program(GenConfig(seed=seed))
            t_m, out_m = mrun(machine, 20_000, env_tape=src.env_tape)
            if out_m.kind != "undef":
                continue
            image = mp_compile(machine)
            t_t, out_t = mp_run(image, 400_000, src.env_tape)
            assert prefix_leq(t_m.open_prefix(), t_t), seed
            if out_t.kind == "violation" and len(t_t.events) == len(t_m.events):
                assert out_t.component == out_m.component, seed

    def test_linearity_scan_on_generated_runs(self):
        for seed in range(40):
            src, machine = gen_program(GenConfig(seed=seed))
            image = mp_compile(machine)
            mp_run(image, 100_000, src.env_tape, debug_linearity=True)

    def test_cache_on_off_identical(self):
        for seed in range(20):
            src, machine = gen_program(GenConfig(seed=seed))
            image = mp_compile(machine)
            a = mp_run(image, 100_000, src.env_tape, use_cache=True)
            b = mp_run(image, 100_000, src.env_tape, use_cache=False)
            assert a == b

    def test_halt_only_image(self):
        program = parse_source("component M { proc main(_) { exit } }")
        image = mp_compile(compile_program(program))
        trace, outcome = mp_run(image, 1000)
        assert outcome.kind == "halted" and trace.events == ()


R_AUX2 = 5


def double_return_image() -> MpImage:
    """Color 2 stores the return address once and tries to return to it twice.

    The first return moves the capability out of the cell and consumes it;
    the second entry reads the same saved address back, now bottom-tagged,
    and the jump through it must be stopped.
    """
    a_code = 1 << 28
    b_code = 2 << 28
    b_cell = (2 << 28) + (1 << 26)      # saved return address
    b_flag = b_cell + 1                 # 0 on first entry, 1 afterwards
    second = b_code + 10
    memory = {
        a_code + 0: encode(JAL, imm=b_code),   # call into color 2
        a_code + 1: encode(JAL, imm=b_code),   # first return lands here
        a_code + 2: encode(HALT),
        b_code + 0: encode(CONST, rd=R_AUX1, imm=b_flag),
        b_code + 1: encode(LOAD, rd=R_AUX2, rs1=R_AUX1),
        b_code + 2: encode(BNZ, rs1=R_AUX2, imm=second),
        # first entry: remember the return address, return through it
        b_code + 3: encode(CONST, rd=R_AUX2, imm=1),
        b_code + 4: encode(STORE, rs1=R_AUX1, rs2=R_AUX2),  # flag := 1
        b_code + 5: encode(CONST, rd=R_AUX1, imm=b_cell),
        b_code + 6: encode(STORE, rs1=R_AUX1, rs2=R_RA),    # cap moves to memory
        b_code + 7: encode(CONST, rd=R_AUX1, imm=b_cell),
        b_code + 8: encode(LOAD, rd=R_COM, rs1=R_AUX1),     # cap moves back
        b_code + 9: encode(JUMP, rs1=R_COM),                # first return
        # second entry: jump to the same saved address again
        b_code + 10: encode(CONST, rd=R_AUX1, imm=b_cell),
        b_code + 11: encode(LOAD, rd=R_COM, rs1=R_AUX1),    # value, no capability
        b_code + 12: encode(JUMP, rs1=R_COM),               # second return
    }
    meta = {
        "main": [1, "main"],
        "entries": {str(b_code): [2, "f"]},
        "entry_colors": {str(b_code): [1]},
        "regions": [[a_code, a_code + 3, 1], [b_code, b_code + 13, 2],
                    [b_cell, b_cell + 4, 2]],
        "alloc_svc": 0x1000,
        "alloc_areas": {"1": (1 << 28) + (2 << 26), "2": (2 << 28) + (2 << 26)},
        "tape": {"cursor": 8, "len": 9, "data": 10, "capacity": 4},
        "comp_shift": 28,
    }
    regs = [0] * 13
    regs[0] = 1
    return MpImage(memory, tuple(regs), a_code, meta)


class TestLinearCapabilities:
    def test_double_return_is_a_violation(self):
        # the first return consumes the capability; re-entering and jumping
        # through the same saved address must be stopped
        image = double_return_image()
        trace, outcome = mp_run(image, 1000, debug_linearity=True)
        assert outcome.kind == "violation"
        assert outcome.component == 2
        assert outcome.detail == "jump-cross-color"
        # first call, first return, second call all happened
        assert len(trace.events) == 3

    def test_capability_cannot_be_duplicated_by_load(self):
        # loading the stored capability twice yields one capability and one
        # bottom tag: jumping with the bottom copy is stopped
        image = double_return_image()
        mem = dict(image.memory)
        b_code = 2 << 28
        b_cell = (2 << 28) + (1 << 26)
        mem[b_code + 0] = encode(CONST, rd=R_AUX1, imm=b_cell)
        mem[b_code + 1] = encode(STORE, rs1=R_AUX1, rs2=R_RA)
        mem[b_code + 2] = encode(LOAD, rd=R_COM, rs1=R_AUX1)   # takes the cap
        mem[b_code + 3] = encode(LOAD, rd=R_RA, rs1=R_AUX1)    # gets bottom
        mem[b_code + 4] = encode(JUMP, rs1=R_RA)               # cross, no cap
        image2 = MpImage(mem, image.initial_regs, image.entry_addr, image.meta)
        _trace, outcome = mp_run(image2, 1000, debug_linearity=True)
        assert outcome.kind == "violation"
        assert outcome.detail == "jump-cross-color"


class TestImageFormat:
    def test_roundtrip(self, fig6_program):
        image = mp_compile(compile_program(fig6_program))
        loaded = load_mp_image(save_mp_image(image))
        assert loaded.memory == image.memory
        assert loaded.meta == image.meta

    def test_bad_magic(self, fig6_program):
        data = save_mp_image(mp_compile(compile_program(fig6_program)))
        with pytest.raises(MpFormatError):
            load_mp_image(b"JUNKXX" + data[6:])
