import pytest

from compartc.backtrans import back_translate
from compartc.compile import compile_program
from compartc.gen import GenConfig, gen_program
from compartc.interp import run_source
from compartc.machine import mrun
from compartc.source import (
    Assign, BinOp, CallExpr, Deref, Exit, If, IntLit, Local, Seq,
    WellFormednessError,
)
from compartc.trace import (
    TERMINATED, TracePrefix, Undef, ecall, eret, prefix_leq,
)

from conftest import FIG6_EVENTS


def expected_dispatch(events, self_id, anchor):
    """The counter dispatcher the back-translation should build."""
    counter = Deref(Local())
    bump = Assign(Local(), BinOp("+", counter, IntLit(1)))
    body = Exit()
    for i, ev in reversed(list(enumerate(events))):
        if ev.kind == "CALL":
            replay = Seq(bump, Seq(CallExpr(ev.dst, ev.proc, IntLit(ev.arg)),
                                   CallExpr(self_id, anchor, IntLit(0))))
        else:
            replay = Seq(bump, IntLit(ev.arg))
        body = If(BinOp("=", counter, IntLit(i)), replay, body)
    return body


def test_fig6_structure(fig6_program, fig6_trace):
    program = back_translate(fig6_trace, fig6_program.interface())
    # same dispatch branches and constants as the published construction
    main_c = program.component(1)
    assert main_c.procedures["mainP"] == expected_dispatch(
        (FIG6_EVENTS[0], FIG6_EVENTS[2]), 1, "mainP")
    c = program.component(2)
    assert c.procedures["p"] == expected_dispatch(
        (FIG6_EVENTS[1], FIG6_EVENTS[3]), 2, "p")
    # counters start at zero in block 0
    assert main_c.buffers == ((0,),)


def test_fig6_round_trip(fig6_program, fig6_trace):
    program = back_translate(fig6_trace, fig6_program.interface())
    trace, outcome = run_source(program, 100_000)
    assert prefix_leq(fig6_trace, trace)
    assert outcome.kind == "terminated"


def test_empty_prefix_exits_immediately(fig6_program):
    program = back_translate(TracePrefix(), fig6_program.interface())
    trace, outcome = run_source(program, 1000)
    assert trace.events == () and outcome.kind == "terminated"
    assert program.component(1).procedures["mainP"] == Exit()


def test_interface_preserved_exactly(fig6_program, fig6_trace):
    interface = fig6_program.interface()
    program = back_translate(fig6_trace, interface)
    assert program.interface() == interface


def test_round_trip_on_harness_prefixes():
    # machine run -> back-translate -> source run reproduces the prefix
    checked = 0
    for seed in range(80):
        src, machine = gen_program(GenConfig(seed=seed))
        t_m, out_m = mrun(machine, 20_000, env_tape=src.env_tape)
        if not t_m.events:
            continue
        m = TracePrefix(t_m.events[:100])
        replay = back_translate(m, machine.interface())
        t_s, out_s = run_source(replay, 2_000_000)
        assert prefix_leq(m, t_s), seed
        assert out_s.kind != "undef", seed
        checked += 1
    assert checked > 40


def test_compiled_replay_also_reproduces(fig6_program, fig6_trace):
    replay = back_translate(fig6_trace, fig6_program.interface())
    t_m, _ = mrun(compile_program(replay), 1_000_000)
    assert prefix_leq(fig6_trace, t_m)


def test_pointwise_dependence():
    # a component's back-translation depends only on its own projection
    iface = back_translate(TracePrefix(), _three_interface()).interface()
    m1 = TracePrefix((ecall(1, 2, "p", 1), eret(2, 1, 2),
                      ecall(1, 3, "q", 3), eret(3, 1, 4)))
    m2 = TracePrefix((ecall(1, 2, "p", 1), eret(2, 1, 2)))
    b1 = back_translate(m1, _three_interface())
    b2 = back_translate(m2, _three_interface())
    assert b1.component(2).procedures == b2.component(2).procedures


def _three_interface():
    from compartc.trace import Interface, ProgramInterface, env_interface
    return ProgramInterface((
        env_interface(),
        Interface(1, frozenset({"go"}), frozenset({(2, "p"), (3, "q")})),
        Interface(2, frozenset({"p"}), frozenset()),
        Interface(3, frozenset({"q"}), frozenset()),
    ), (1, "go"))


def test_rejects_undef_terminated_prefix(fig6_program, fig6_trace):
    bad = TracePrefix(fig6_trace.events, Undef(1))
    with pytest.raises(WellFormednessError):
        back_translate(bad, fig6_program.interface())


def test_rejects_ill_bracketed_prefix(fig6_program):
    bad = TracePrefix((eret(1, 2, 0),))
    with pytest.raises(WellFormednessError):
        back_translate(bad, fig6_program.interface())


def test_rejects_unproducible_write_answer():
    iface = _three_interface()
    from compartc.trace import Interface, ProgramInterface, env_interface
    iface = ProgramInterface((
        env_interface(),
        Interface(1, frozenset({"go"}), frozenset({(0, "write")})),
    ), (1, "go"))
    bad = TracePrefix((ecall(1, 0, "write", 5), eret(0, 1, 99)))
    with pytest.raises(WellFormednessError):
        back_translate(bad, iface)


def test_environment_answers_become_the_tape():
    from compartc.trace import Interface, ProgramInterface, env_interface
    iface = ProgramInterface((
        env_interface(),
        Interface(1, frozenset({"go"}), frozenset({(0, "read"), (0, "write")})),
    ), (1, "go"))
    m = TracePrefix((
        ecall(1, 0, "read", 0), eret(0, 1, 41),
        ecall(1, 0, "write", 42), eret(0, 1, 0),
        ecall(1, 0, "read", 0), eret(0, 1, 17),
    ))
    program = back_translate(m, iface)
    assert program.env_tape == (41, 17)
    trace, _ = run_source(program, 100_000)
    assert prefix_leq(m, trace)
