"""Building a source program that replays a finite trace prefix.

Each component keeps a counter in ``local[0]`` of how many events it has
produced.  All of its exported procedures share one dispatch body: branch i
bumps the counter and replays the component's i-th produced event -- a call
branch performs the call and then silently re-enters the dispatcher through
an internal self-call, a return branch just yields the recorded value --
and the branch past the last event exits.  The resulting program has
exactly the given interface, and running it reproduces the prefix (and may
then continue before exiting).

The environment's answers are reconstructed into the program's input tape
so replayed ``read`` calls receive the recorded values.
"""

from __future__ import annotations

from .source import (
    Assign, BinOp, CallExpr, Deref, EXIT, Expr, If, IntLit, LOCAL,
    Seq, SourceComponent, SourceProgram, WellFormednessError,
)
from .trace import (
    CALL, ENV, Event, ProgramInterface, TracePrefix, Undef,
    project_events, well_formed_prefix,
)


def _bump_counter() -> Expr:
    return Assign(LOCAL, BinOp("+", Deref(LOCAL), IntLit(1)))


def _dispatch_body(events: tuple[Event, ...], self_id: int, anchor: str) -> Expr:
    body: Expr = EXIT
    for i in reversed(range(len(events))):
        ev = events[i]
        if ev.kind == CALL:
            replay: Expr = Seq(
                _bump_counter(),
                Seq(CallExpr(ev.dst, ev.proc, IntLit(ev.arg)),
                    CallExpr(self_id, anchor, IntLit(0))),
            )
        else:
            replay = Seq(_bump_counter(), IntLit(ev.arg))
        body = If(BinOp("=", Deref(LOCAL), IntLit(i)), replay, body)
    return body


def _env_tape(m: TracePrefix) -> tuple[int, ...]:
    """Recover the tape that makes the environment answer as recorded."""
    tape = []
    events = m.events
    for i, e in enumerate(events):
        if e.kind == CALL and e.dst == ENV:
            if i + 1 < len(events):
                answer = events[i + 1]
                if not (answer.kind == "RET" and answer.src == ENV
                        and answer.dst == e.src):
                    raise WellFormednessError(
                        "back-translate", "environment call not answered in order")
                if e.proc == "read":
                    tape.append(answer.arg)
                elif answer.arg != 0:
                    raise WellFormednessError(
                        "back-translate",
                        "prefix not producible: write answered with nonzero value")
    return tuple(tape)


def back_translate(m: TracePrefix, interface: ProgramInterface,
                   names: list[str] | None = None) -> SourceProgram:
    """Whole source program with the given interface whose run replays m."""
    if isinstance(m.terminator, Undef):
        raise WellFormednessError("back-translate", "prefix ends in undefined behavior")
    if not well_formed_prefix(m, interface):
        raise WellFormednessError("back-translate", "prefix is not well formed")

    main_comp, main_proc = interface.main
    components = []
    for iface in interface.interfaces[1:]:
        cid = iface.component
        exports = sorted(iface.exports)
        proc_names = set(exports)
        if cid == main_comp:
            proc_names.add(main_proc)
        if cid == main_comp:
            anchor = main_proc
        else:
            anchor = exports[0] if exports else ""
        body = _dispatch_body(project_events(m, cid), cid, anchor)
        name = names[cid] if names else f"C{cid}"
        components.append(SourceComponent(
            interface=iface,
            procedures={p: body for p in sorted(proc_names)},
            buffers=((0,),),
            name=name,
        ))

    return SourceProgram(tuple(components), interface.main, _env_tape(m))
