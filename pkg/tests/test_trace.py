import random

import pytest

from compartc.trace import (
    TERMINATED, Event, Interface, ProgramInterface, TraceFormatError,
    TracePrefix, Undef, always, ecall, env_interface, eret, format_trace,
    interface_from_json, interface_to_json, interfaces_compatible,
    parse_trace, prec_blame, prefix_leq, project_events, strengthen_zp,
    weaken_zp, well_formed_prefix, TraceProperty,
)

from conftest import FIG6_EVENTS, random_prefix


def fig6_interface() -> ProgramInterface:
    return ProgramInterface((
        env_interface(),
        Interface(1, frozenset({"mainP"}), frozenset({(2, "p")})),
        Interface(2, frozenset({"p"}), frozenset({(1, "mainP")})),
    ), (1, "mainP"))


class TestEvent:
    def test_src_dst_must_differ(self):
        with pytest.raises(ValueError):
            ecall(1, 1, "p", 0)

    def test_call_needs_proc(self):
        with pytest.raises(ValueError):
            Event("CALL", 1, 2, 0)

    def test_ret_carries_no_proc(self):
        with pytest.raises(ValueError):
            Event("RET", 1, 2, 0, "p")


class TestPrefixLeq:
    def test_empty_prefix_below_anything(self, fig6_trace):
        assert prefix_leq(TracePrefix(), fig6_trace)

    def test_reflexive(self, fig6_trace):
        assert prefix_leq(fig6_trace, fig6_trace)

    def test_one_event_below_fig6(self, fig6_trace):
        m = TracePrefix(FIG6_EVENTS[:1])
        assert prefix_leq(m, fig6_trace)

    def test_terminator_must_match_at_position(self):
        t = TracePrefix(FIG6_EVENTS, TERMINATED)
        assert not prefix_leq(TracePrefix(FIG6_EVENTS[:2], TERMINATED), t)
        assert prefix_leq(TracePrefix(FIG6_EVENTS, TERMINATED), t)
        assert prefix_leq(TracePrefix(FIG6_EVENTS[:2]), t)

    def test_partial_order_laws(self):
        rng = random.Random(7)
        prefixes = [random_prefix(rng) for _ in range(300)]
        for m in prefixes:
            assert prefix_leq(m, m)
        pairs = [(rng.choice(prefixes), rng.choice(prefixes))
                 for _ in range(400)]
        for a, b in pairs:
            if prefix_leq(a, b) and prefix_leq(b, a):
                assert a == b
        for _ in range(400):
            a, b, c = (rng.choice(prefixes) for _ in range(3))
            if prefix_leq(a, b) and prefix_leq(b, c):
                assert prefix_leq(a, c)


class TestPrecBlame:
    def test_definition_unfolding(self):
        e1 = ecall(1, 2, "p", 0)
        e2 = eret(2, 1, 3)
        t = TracePrefix((e1,), Undef(1))
        m = TracePrefix((e1, e2))
        assert prec_blame(t, m, {1})

    def test_empty_prefix_case(self):
        assert prec_blame(TracePrefix((), Undef(1)), TracePrefix(), {1})

    def test_wrong_blame(self):
        e1 = ecall(1, 2, "p", 0)
        t = TracePrefix((e1,), Undef(2))
        m = TracePrefix((e1, eret(2, 1, 3)))
        assert not prec_blame(t, m, {1})

    def test_not_a_prefix(self):
        t = TracePrefix((ecall(1, 2, "q", 9),), Undef(1))
        m = TracePrefix((ecall(1, 2, "p", 0),))
        assert not prec_blame(t, m, {1})

    def test_blame_set_union_distributes(self):
        rng = random.Random(3)
        for _ in range(300)  :
            m = random_prefix(rng, 6)
            t = random_prefix(rng, 6)
            s1 = {rng.randrange(1, 4)}
            s2 = {rng.randrange(1, 4)}
            assert prec_blame(t, m, s1 | s2) == (
                prec_blame(t, m, s1) or prec_blame(t, m, s2))


class TestWellFormed:
    def test_fig6_trace_is_well_formed(self, fig6_trace):
        assert well_formed_prefix(fig6_trace, fig6_interface())

    def test_single_return_is_not(self):
        m = TracePrefix((eret(1, 2, 0),))
        assert not well_formed_prefix(m, fig6_interface())

    def test_call_to_non_import(self):
        m = TracePrefix((ecall(1, 2, "secret", 0),))
        assert not well_formed_prefix(m, fig6_interface())

    def test_first_event_from_main(self):
        # producer of the first event must be the main component
        m = TracePrefix((ecall(2, 1, "mainP", 0),))
        assert not well_formed_prefix(m, fig6_interface())

    def test_prefix_closed(self, fig6_trace):
        iface = fig6_interface()
        for k in range(len(fig6_trace.events) + 1):
            assert well_formed_prefix(TracePrefix(fig6_trace.events[:k]), iface)


class TestProjection:
    def test_fig6_projections(self, fig6_trace):
        assert project_events(fig6_trace, 1) == (FIG6_EVENTS[0], FIG6_EVENTS[2])
        assert project_events(fig6_trace, 2) == (FIG6_EVENTS[1], FIG6_EVENTS[3])

    def test_absent_component(self, fig6_trace):
        assert project_events(fig6_trace, 3) == ()

    def test_partition_reconstructs(self):
        rng = random.Random(11)
        for _ in range(200):
            m = random_prefix(rng)
            projections = {c: list(project_events(m, c)) for c in range(4)}
            rebuilt = []
            for e in m.events:
                assert projections[e.src][0] == e
                rebuilt.append(projections[e.src].pop(0))
            assert tuple(rebuilt) == m.events
            assert all(not rest for rest in projections.values())


def _s1_corpus():
    """Write events must be preceded by a read returning the same payload."""

    def accepts(m: TracePrefix) -> bool:
        seen_reads = []
        for e in m.events:
            if e.kind == "RET" and e.src == 0:
                seen_reads.append(e.arg)
            if e.kind == "CALL" and e.dst == 0 and e.proc == "write":
                if e.arg not in seen_reads:
                    return False
        return True

    alphabet = (
        ecall(1, 0, "read", 0),
        eret(0, 1, 7),
        ecall(1, 0, "write", 7),
        ecall(1, 2, "parse", 7),
    )
    return TraceProperty(accepts, "s1", alphabet)


class TestBlameClosures:
    def test_strengthen_of_true_accepts_everything(self):
        pi = strengthen_zp(always(True), {1, 2})
        rng = random.Random(5)
        assert all(pi(random_prefix(rng)) for _ in range(100))

    def test_strengthen_rejects_what_pi_rejects(self):
        s1 = _s1_corpus()
        bad = TracePrefix((ecall(1, 0, "write", 7),))
        assert not s1(bad)
        assert not strengthen_zp(s1, {1})(bad)

    def test_strengthen_rejects_undef_with_bad_continuations(self):
        # an undefined component may be implemented by a write, so a prefix
        # with no preceding read must already be rejected
        s1 = _s1_corpus()
        strong = strengthen_zp(s1, {1, 2, 3})
        m = TracePrefix((ecall(1, 2, "parse", 7),), Undef(1))
        assert s1(m)
        assert not strong(m)

    def test_strengthen_implies_pi(self):
        s1 = _s1_corpus()
        strong = strengthen_zp(s1, {1, 2})
        rng = random.Random(9)
        for _ in range(300):
            m = random_prefix(rng)
            if strong(m):
                assert s1(m)

    def test_strengthen_closed_under_encoded_check(self):
        s1 = _s1_corpus()
        blamed = frozenset({1, 2})
        strong = strengthen_zp(s1, blamed)
        rng = random.Random(13)
        for _ in range(200):
            m = random_prefix(rng)
            if strong(m):
                for k in range(len(m.events) + 1):
                    for c in blamed:
                        assert s1(TracePrefix(m.events[:k], Undef(c)))

    def test_weaken_of_false_rejects_plain_prefixes(self):
        weak = weaken_zp(always(False), {1})
        assert not weak(TracePrefix((ecall(1, 2, "p", 0),)))

    def test_weaken_prefix_of_witness(self):
        s1 = _s1_corpus()
        witness = TracePrefix((ecall(1, 0, "read", 0), eret(0, 1, 7),
                               ecall(1, 0, "write", 7)), TERMINATED)
        weak = weaken_zp(always(False), {1}, witnesses=[witness])
        assert not weak(witness)  # witness itself is rejected by always-false
        weak = weaken_zp(s1, {1}, witnesses=[witness])
        assert weak(TracePrefix(witness.events[:2]))

    def test_weaken_undef_truncation_of_witness(self):
        # brute-force check of the truncation clause on a three-event witness
        s1 = _s1_corpus()
        witness = TracePrefix((ecall(1, 0, "read", 0), eret(0, 1, 7),
                               ecall(1, 0, "write", 7)))
        assert s1(witness)
        weak = weaken_zp(s1, {2}, witnesses=[witness])
        for k in range(len(witness.events) + 1):
            query = TracePrefix(witness.events[:k], Undef(2))
            assert weak(query), k

    def test_weaken_superset_of_pi(self):
        s1 = _s1_corpus()
        weak = weaken_zp(s1, {1, 2})
        rng = random.Random(21)
        for _ in range(300):
            m = random_prefix(rng)
            if s1(m):
                assert weak(m)

    def test_weaken_accepts_undef_extension_of_accepted_undef(self):
        # accepted blamed-undef truncations license arbitrary continuations
        pi = TraceProperty(lambda m: isinstance(m.terminator, Undef), "undef-only")
        weak = weaken_zp(pi, {1})
        extended = TracePrefix((ecall(1, 2, "p", 0), eret(2, 1, 0)))
        assert weak(extended)


class TestSerialization:
    def test_roundtrip(self, fig6_trace):
        for term in (None, TERMINATED, Undef(2)):
            t = TracePrefix(fig6_trace.events, term)
            assert parse_trace(format_trace(t)) == t

    def test_format_is_stable(self, fig6_trace):
        text = format_trace(TracePrefix(fig6_trace.events, TERMINATED))
        assert text == ("CALL 1 2.p 0\nRET 2 1 1\nCALL 1 2.p 2\n"
                        "CALL 2 1.mainP 3\nEND\n")

    def test_negative_args(self):
        t = TracePrefix((ecall(1, 2, "p", -77),))
        assert parse_trace(format_trace(t)) == t

    def test_bad_record(self):
        with pytest.raises(TraceFormatError):
            parse_trace("CALL 1 2.p\n")
        with pytest.raises(TraceFormatError):
            parse_trace("JUMP 1 2 3\n")

    def test_events_after_terminator_rejected(self):
        with pytest.raises(TraceFormatError):
            parse_trace("END\nCALL 1 2.p 0\n")

    def test_random_roundtrip(self):
        rng = random.Random(2)
        for _ in range(200):
            m = random_prefix(rng)
            assert parse_trace(format_trace(m)) == m


class TestInterfaces:
    def test_compatible(self):
        assert interfaces_compatible(list(fig6_interface().interfaces)) == []

    def test_import_of_unexported(self):
        bad = [env_interface(),
               Interface(1, frozenset(), frozenset({(0, "launch")}))]
        assert interfaces_compatible(bad)

    def test_self_import_rejected(self):
        with pytest.raises(ValueError):
            Interface(1, frozenset(), frozenset({(1, "p")}))

    def test_json_roundtrip(self):
        iface = fig6_interface()
        names = ["E", "MainC", "C"]
        loaded, loaded_names = interface_from_json(interface_to_json(iface, names))
        assert loaded == iface
        assert loaded_names == names
