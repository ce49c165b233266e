import random

import pytest

from compartc.compile import compile_program
from compartc.flat import BINOP, BOP_AND, BOP_OR, JAL, STORE, decode
from compartc.gen import GenConfig, gen_program
from compartc.harness import _sfi_layout, mutate_instrumentation
from compartc.machine import Halt, MachineComponent, link_machine, mrun
from compartc.parser import parse_source
from compartc.sfi import (
    ALIGN, CapacityError, LayoutConfig, SfiFormatError, load_sfi_image,
    phys_decode, phys_encode, save_sfi_image, sfi_check_invariants,
    sfi_compile, sfi_run,
)
from compartc.trace import Interface, prefix_leq
from compartc.values import TOP


class TestPhysicalAddresses:
    def test_zero(self):
        assert phys_encode(0, 0, 0, 12, 2) == 0

    def test_hand_computed_example(self):
        # slot 2, component 1, offset 5 with 12 offset bits and 2 component
        # bits: 2*2^14 + 1*2^12 + 5
        assert phys_encode(1, 2, 5, 12, 2) == 36869

    def test_decode_encode_identity(self):
        rng = random.Random(4)
        for _ in range(2000):
            ob = rng.randint(6, 14)
            cb = rng.randint(1, 6)
            comp = rng.randrange(1 << cb)
            slot = rng.randrange(1 << 10)
            off = rng.randrange(1 << ob)
            addr = phys_encode(comp, slot, off, ob, cb)
            assert phys_decode(addr, ob, cb) == (comp, slot, off)

    def test_range_violations(self):
        with pytest.raises(ValueError):
            phys_encode(4, 0, 0, 12, 2)
        with pytest.raises(ValueError):
            phys_encode(0, 0, 1 << 12, 12, 2)
        with pytest.raises(ValueError):
            phys_encode(0, -1, 0, 12, 2)

    def test_offset_bits_floor(self):
        with pytest.raises(ValueError):
            LayoutConfig(offset_bits=5)


def _component_code_words(image):
    for comp, (start, end) in image.meta["code_ranges"].items():
        for addr in range(start, end):
            yield addr, image.memory.get(addr, 0)


class TestStructure:
    def test_every_store_preceded_by_mask_pair(self, fig6_program):
        image = sfi_compile(compile_program(fig6_program), _sfi_layout())
        push_pcs = {s["store"] for s in image.meta["push_sites"]}
        stores = 0
        for addr, word in _component_code_words(image):
            op, rd, rs1, rs2, imm = decode(word)
            if op != STORE or addr in push_pcs:
                continue
            stores += 1
            op1, _, _, _, sub1 = decode(image.memory.get(addr - 2, 0))
            op2, _, _, _, sub2 = decode(image.memory.get(addr - 1, 0))
            assert (op1, sub1 & 0xF) == (BINOP, BOP_AND), addr
            assert (op2, sub2 & 0xF) == (BINOP, BOP_OR), addr
        assert stores > 0

    def test_entries_unaligned_and_jal_pads_aligned(self, fig6_program):
        machine = compile_program(fig6_program)
        image = sfi_compile(machine, _sfi_layout())
        entries = [int(a) for a in image.meta["entries"]]
        assert entries and all(a % ALIGN != 0 for a in entries)
        # the word before each entry is its aligned guard Halt
        for a in entries:
            assert (a - 1) % ALIGN == 0
            assert decode(image.memory.get(a - 1, 0))[0] == 0  # Halt
        # every internal Jal (not targeting an entry or the service) returns
        # to an aligned landing pad
        svc_start, svc_end = image.meta["service"]
        internal_jals = 0
        for addr, word in _component_code_words(image):
            op, _, _, _, imm = decode(word)
            if op == JAL and imm not in entries and not svc_start <= imm < svc_end:
                internal_jals += 1
                assert (addr + 1) % ALIGN == 0, addr
        assert internal_jals > 0

    def test_instrumentation_sequences_do_not_straddle_blocks(self, fig6_program):
        image = sfi_compile(compile_program(fig6_program), _sfi_layout())
        meta = image.meta
        for site in meta["store_sites"]:
            assert site["and"] // ALIGN == site["store"] // ALIGN
        for site in meta["jump_sites"]:
            assert site["const"] // ALIGN == site["jump"] // ALIGN
        for site in meta["pop_sites"]:
            assert site["const"] % ALIGN == 0
        for site in meta["push_sites"]:
            assert (site["store"] - 1) % ALIGN == 0


class TestRuns:
    def test_defined_program_trace_equality(self):
        checked = 0
        for seed in range(60):
            src, machine = gen_program(GenConfig(seed=seed))
            t_m, out_m = mrun(machine, 20_000, env_tape=src.env_tape)
            image = sfi_compile(machine, _sfi_layout())
            t_t, _log, out_t = sfi_run(image, 400_000, src.env_tape)
            if out_m.kind != "halted" or out_t.kind == "out_of_fuel":
                continue
            assert t_t == t_m, seed
            checked += 1
        assert checked > 20

    def test_undefined_program_prefix_extension(self):
        checked = 0
        for seed in range(60):
            src, machine = gen_program(GenConfig(seed=seed))
            t_m, out_m = mrun(machine, 20_000, env_tape=src.env_tape)
            if out_m.kind != "undef":
                continue
            image = sfi_compile(machine, _sfi_layout())
            t_t, _log, _out = sfi_run(image, 400_000, src.env_tape)
            assert prefix_leq(t_m.open_prefix(), t_t), seed
            checked += 1
        assert checked > 15

    def test_invariants_hold_unmutated(self):
        for seed in range(60):
            src, machine = gen_program(GenConfig(seed=seed))
            image = sfi_compile(machine, _sfi_layout())
            _t, log, _o = sfi_run(image, 300_000, src.env_tape)
            assert sfi_check_invariants(log, image.meta).all_hold(), seed

    def test_halt_program_halts_at_once(self):
        program = parse_source("component M { proc main(_) { exit } }")
        image = sfi_compile(compile_program(program), _sfi_layout())
        trace, log, outcome = sfi_run(image, 1000)
        assert outcome.kind == "halted" and trace.events == ()
        assert sfi_check_invariants(log, image.meta).all_hold()

    def test_tape_too_long(self, fig6_program):
        image = sfi_compile(compile_program(fig6_program), _sfi_layout())
        with pytest.raises(CapacityError):
            sfi_run(image, 100, tuple(range(1 << 14)))

    def test_log_json_lines(self, fig6_program):
        image = sfi_compile(compile_program(fig6_program), _sfi_layout())
        _t, log, _o = sfi_run(image, 200_000)
        lines = log.to_json_lines().splitlines()
        assert lines
        import json
        kinds = {json.loads(line)["type"] for line in lines}
        assert {"write", "transfer", "halt"} <= kinds


class TestFaultInjection:
    def _wild_store_program(self):
        # smashes the saved return address before returning
        off = 2 * (1 << 14) + 1
        return parse_source(f"""
component M {{
  buffers {{0}};
  proc main(_) {{ (local + {off}) := 99; (7) := 5; 7 }}
}}
""")

    def test_uninstrumented_store_breaks_invariant_one(self):
        machine = compile_program(self._wild_store_program())
        image = sfi_compile(machine, _sfi_layout())
        mutated = mutate_instrumentation(image, "DropStoreMask")
        _t, log, _o = sfi_run(mutated, 100_000)
        report = sfi_check_invariants(log, mutated.meta)
        assert not report.write_isolation

    def test_unaligned_jump_breaks_invariant_two(self):
        machine = compile_program(self._wild_store_program())
        image = sfi_compile(machine, _sfi_layout())
        mutated = mutate_instrumentation(image, "DropJumpAlign")
        _t, log, _o = sfi_run(mutated, 100_000)
        report = sfi_check_invariants(log, mutated.meta)
        assert not (report.transfer_discipline and report.stack_wellformed)

    def test_unmutated_wild_program_stays_contained(self):
        machine = compile_program(self._wild_store_program())
        image = sfi_compile(machine, _sfi_layout())
        _t, log, _o = sfi_run(image, 100_000)
        assert sfi_check_invariants(log, image.meta).all_hold()


class TestAllocService:
    def test_alloc_programs_agree(self):
        program = parse_source("""
component M {
  buffers {0};
  proc main(_) { local[0] := alloc 3; (!local + 2) := 8; !(!local + 2); exit }
}""")
        machine = compile_program(program)
        t_m, out_m = mrun(machine, 100_000)
        image = sfi_compile(machine, _sfi_layout())
        t_t, log, out_t = sfi_run(image, 400_000)
        assert out_t.kind == "halted" and t_t == t_m
        assert sfi_check_invariants(log, image.meta).all_hold()

    def test_exhaustion_halts(self):
        program = parse_source("""
component M {
  buffers {0};
  proc main(_) { local[0] := alloc 1; local[0] := alloc 1; local[0] := alloc 1; exit }
}""")
        machine = compile_program(program)
        image = sfi_compile(machine, LayoutConfig(offset_bits=13,
                                                  alloc_slot_budget=2))
        trace, log, outcome = sfi_run(image, 400_000)
        assert outcome.kind == "halted"
        assert log.halts  # the service halt is recorded
        svc_start, svc_end = image.meta["service"]
        assert any(svc_start <= pc < svc_end for (pc,) in log.halts)


class TestCapacity:
    def test_block_exceeding_slot(self):
        program = parse_source(
            f"component M {{ buffers [{(1 << 13) + 1}]; proc main(_) {{ exit }} }}")
        with pytest.raises(CapacityError):
            sfi_compile(compile_program(program), _sfi_layout())

    def test_component_bits_too_small(self):
        program = parse_source("""
component A { proc main(_) { exit } }
component B { export f; proc f(_) { 0 } }
component C { export g; proc g(_) { 0 } }
""")
        with pytest.raises(CapacityError):
            sfi_compile(compile_program(program),
                        LayoutConfig(offset_bits=12, component_bits=1))


class TestImageFormat:
    def test_roundtrip(self, fig6_program):
        image = sfi_compile(compile_program(fig6_program), _sfi_layout())
        loaded = load_sfi_image(save_sfi_image(image))
        assert loaded.memory == image.memory
        assert loaded.initial_regs == image.initial_regs
        assert loaded.entry_addr == image.entry_addr
        assert loaded.meta == image.meta

    def test_bad_magic(self, fig6_program):
        data = save_sfi_image(sfi_compile(compile_program(fig6_program),
                                          _sfi_layout()))
        with pytest.raises(SfiFormatError):
            load_sfi_image(b"NOPE" + data[4:])

    def test_truncated(self, fig6_program):
        data = save_sfi_image(sfi_compile(compile_program(fig6_program),
                                          _sfi_layout()))
        with pytest.raises(SfiFormatError):
            load_sfi_image(data[:20])
