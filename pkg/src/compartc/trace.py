"""Events, trace prefixes, interfaces, and the relations between them.

Everything else in the chain is judged against this vocabulary: a run of any
of the machines produces a finite ``TracePrefix`` of cross-component calls
and returns, optionally closed by a terminator that says how the run ended
(normal termination, or undefined behavior attributed to one component).

Component 0 is always the environment ``E``: it has an interface (it exports
``read`` and ``write``) but no implementation, and it produces the return
events that answer calls into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

ENV = 0  # component id reserved for the environment

CALL = "CALL"
RET = "RET"

# Terminator sentinels for TracePrefix.  ``None`` means the prefix is open
# (the run may continue past it, e.g. it ran out of fuel).
TERMINATED = "END"


@dataclass(frozen=True, slots=True)
class Undef:
    """Terminal marker: undefined behavior attributed to one component."""

    component: int

    def __str__(self) -> str:
        return f"UNDEF {self.component}"


@dataclass(frozen=True, slots=True)
class Event:
    """A cross-component call or return with an integer payload.

    A call is produced by its caller, a return by the returning component;
    ``src`` is always the producer.  ``proc`` is set for calls only.
    """

    kind: str  # CALL | RET
    src: int
    dst: int
    arg: int
    proc: str | None = None

    def __post_init__(self):
        if self.kind not in (CALL, RET):
            raise ValueError(f"bad event kind {self.kind!r}")
        if self.src == self.dst:
            raise ValueError("event src and dst must differ")
        if self.kind == CALL and not self.proc:
            raise ValueError("call event needs a procedure name")
        if self.kind == RET and self.proc is not None:
            raise ValueError("return event carries no procedure name")

    def __str__(self) -> str:
        if self.kind == CALL:
            return f"CALL {self.src} {self.dst}.{self.proc} {self.arg}"
        return f"RET {self.src} {self.dst} {self.arg}"


def ecall(src: int, dst: int, proc: str, arg: int) -> Event:
    return Event(CALL, src, dst, arg, proc)


def eret(src: int, dst: int, arg: int) -> Event:
    return Event(RET, src, dst, arg)


@dataclass(frozen=True, slots=True)
class TracePrefix:
    """A finite sequence of events plus an optional terminator.

    terminator is None (open), TERMINATED, or Undef(component).
    """

    events: tuple[Event, ...] = ()
    terminator: object = None

    def __post_init__(self):
        t = self.terminator
        if not (t is None or t == TERMINATED or isinstance(t, Undef)):
            raise ValueError(f"bad terminator {t!r}")

    def __len__(self) -> int:
        return len(self.events)

    def open_prefix(self) -> "TracePrefix":
        """The same events with the terminator stripped."""
        return TracePrefix(self.events)

    def with_undef(self, component: int) -> "TracePrefix":
        return TracePrefix(self.events, Undef(component))


def prefix(events: Iterable[Event], terminator: object = None) -> TracePrefix:
    return TracePrefix(tuple(events), terminator)


@dataclass(frozen=True, slots=True)
class Outcome:
    """How a run ended, at any level of the chain."""

    kind: str  # terminated | halted | undef | out_of_fuel | violation
    component: int | None = None
    detail: str | None = None

    def is_normal(self) -> bool:
        return self.kind in ("terminated", "halted")


OUT_OF_FUEL = Outcome("out_of_fuel")
TERMINATED_OUTCOME = Outcome("terminated")
HALTED = Outcome("halted")


def undef_outcome(component: int) -> Outcome:
    return Outcome("undef", component)


# ---------------------------------------------------------------------------
# Interfaces


@dataclass(frozen=True)
class Interface:
    """Privilege specification of one component: what it exports and imports."""

    component: int
    exports: frozenset[str] = frozenset()
    imports: frozenset[tuple[int, str]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "exports", frozenset(self.exports))
        object.__setattr__(self, "imports", frozenset(self.imports))
        for comp, _ in self.imports:
            if comp == self.component:
                raise ValueError(
                    f"component {self.component} imports from itself"
                )


ENV_EXPORTS = frozenset({"read", "write"})


def env_interface() -> Interface:
    return Interface(ENV, ENV_EXPORTS, frozenset())


@dataclass(frozen=True)
class ProgramInterface:
    """Interfaces of a whole program, dense by component id, plus its entry.

    ``interfaces[0]`` is the environment.  ``main`` is (component id,
    procedure name); the procedure need not be exported.
    """

    interfaces: tuple[Interface, ...]
    main: tuple[int, str]

    def __post_init__(self):
        for i, iface in enumerate(self.interfaces):
            if iface.component != i:
                raise ValueError("interfaces must be dense by component id")
        if not (0 < self.main[0] < len(self.interfaces)):
            raise ValueError("main component out of range (and never E)")

    @property
    def component_count(self) -> int:
        return len(self.interfaces)

    def exports_of(self, comp: int) -> frozenset[str]:
        return self.interfaces[comp].exports

    def imports_of(self, comp: int) -> frozenset[tuple[int, str]]:
        return self.interfaces[comp].imports


def interfaces_compatible(interfaces: Sequence[Interface]) -> list[str]:
    """Check a dense family of interfaces; returns a list of problems."""
    problems = []
    by_id = {}
    for iface in interfaces:
        if iface.component in by_id:
            problems.append(f"duplicate component id {iface.component}")
        by_id[iface.component] = iface
    for i in range(len(interfaces)):
        if i not in by_id:
            problems.append(f"component ids not dense: missing {i}")
    for iface in interfaces:
        for comp, proc in sorted(iface.imports):
            target = by_id.get(comp)
            if target is None:
                problems.append(
                    f"component {iface.component} imports {comp}.{proc} "
                    f"from a missing component"
                )
            elif proc not in target.exports:
                problems.append(
                    f"component {iface.component} imports {comp}.{proc} "
                    f"which is not exported"
                )
    return problems


# ---------------------------------------------------------------------------
# Trace relations


def prefix_leq(m: TracePrefix, t: TracePrefix) -> bool:
    """True iff m is an initial segment of t.

    An open m only needs its events to be a prefix of t's; a terminated m
    must match t's terminator at the same position.
    """
    n = len(m.events)
    if m.events != t.events[:n]:
        return False
    if m.terminator is None:
        return True
    return n == len(t.events) and m.terminator == t.terminator


def prec_blame(t: TracePrefix, m: TracePrefix, blamed: frozenset[int] | set[int]) -> bool:
    """True iff t equals a prefix of m followed by Undef of a blamed component."""
    if not isinstance(t.terminator, Undef):
        return False
    if t.terminator.component not in blamed:
        return False
    n = len(t.events)
    return t.events == m.events[:n]


def project_events(m: TracePrefix, comp: int) -> tuple[Event, ...]:
    """The subsequence of m's events produced by comp (calls and returns it made)."""
    return tuple(e for e in m.events if e.src == comp)


def well_formed_prefix(m: TracePrefix, interface: ProgramInterface) -> bool:
    """Bracketing, interface respect, and main-first, all at once.

    Control starts in the main component; every event must be produced by
    the component currently in control; calls push the caller, returns pop
    it and must hand control back to that caller.
    """
    n = interface.component_count
    current = interface.main[0]
    stack: list[int] = []
    for e in m.events:
        if not (0 <= e.src < n and 0 <= e.dst < n):
            return False
        if e.src != current:
            return False
        if e.kind == CALL:
            if e.proc not in interface.exports_of(e.dst):
                return False
            if (e.dst, e.proc) not in interface.imports_of(e.src):
                return False
            stack.append(current)
            current = e.dst
        else:
            if not stack:
                return False
            caller = stack.pop()
            if e.dst != caller:
                return False
            current = caller
    if isinstance(m.terminator, Undef):
        c = m.terminator.component
        if not (0 < c < n):
            return False
    return True


# ---------------------------------------------------------------------------
# Trace properties and the blame-closure transformers


@dataclass(frozen=True)
class TraceProperty:
    """A decision procedure over finite prefixes, standing in for a trace set.

    ``alphabet`` optionally lists the events relevant to the property; the
    strengthening transformer uses it to search for violating extensions of
    a prefix (the only executable rendering of "every continuation stays in
    the property" at finite scale).
    """

    accepts: Callable[[TracePrefix], bool]
    name: str = "property"
    alphabet: tuple[Event, ...] = ()

    def __call__(self, m: TracePrefix) -> bool:
        return bool(self.accepts(m))


def always(value: bool, name: str | None = None) -> TraceProperty:
    return TraceProperty(lambda m: value, name or f"always-{value}")


def _has_violating_extension(
    pi: TraceProperty, events: tuple[Event, ...], horizon: int
) -> bool:
    """Bounded search for a rejected continuation of ``events``.

    Explores extensions over pi's alphabet up to ``horizon`` extra events.
    With an empty alphabet only the zero-length extension is checked.
    """
    frontier = [events]
    for _ in range(horizon + 1):
        next_frontier = []
        for evs in frontier:
            if not pi(TracePrefix(evs)):
                return True
            for e in pi.alphabet:
                next_frontier.append(evs + (e,))
        frontier = next_frontier
        if not frontier:
            break
    return False


def strengthen_zp(
    pi: TraceProperty, blamed: frozenset[int] | set[int], horizon: int = 2
) -> TraceProperty:
    """Strongest blame-closed restriction of pi, rendered on finite prefixes.

    A prefix is kept iff pi accepts it, pi accepts every truncation of it
    that ends in Undef of a blamed component, and, when the prefix itself
    ends in Undef of a blamed component, no continuation of its events
    (searched over pi's alphabet up to ``horizon``) is rejected by pi --
    an undefined component may be implemented by any continuation, so the
    property must already tolerate all of them.
    """
    blamed = frozenset(blamed)

    def accepts(m: TracePrefix) -> bool:
        if not pi(m):
            return False
        for k in range(len(m.events) + 1):
            for c in blamed:
                if not pi(TracePrefix(m.events[:k], Undef(c))):
                    return False
        if isinstance(m.terminator, Undef) and m.terminator.component in blamed:
            if _has_violating_extension(pi, m.events, horizon):
                return False
        return True

    return TraceProperty(accepts, f"{pi.name}+zp", pi.alphabet)


def weaken_zp(
    pi: TraceProperty,
    blamed: frozenset[int] | set[int],
    witnesses: Sequence[TracePrefix] = (),
) -> TraceProperty:
    """Weakest blame-closed extension of pi, rendered on finite prefixes.

    A prefix m is accepted if pi accepts it; or some truncation of m ending
    in Undef of a blamed component is accepted by pi (whatever follows such
    an accepted undefined run is unconstrained); or m is related to a
    caller-supplied accepted witness trace, either as a plain prefix of it
    or as a blamed-Undef truncation of it.
    """
    blamed = frozenset(blamed)
    witnesses = tuple(witnesses)

    def accepts(m: TracePrefix) -> bool:
        if pi(m):
            return True
        for k in range(len(m.events) + 1):
            for c in blamed:
                if pi(TracePrefix(m.events[:k], Undef(c))):
                    return True
        for w in witnesses:
            if not pi(w):
                continue
            if prefix_leq(m, w):
                return True
            if (
                isinstance(m.terminator, Undef)
                and m.terminator.component in blamed
                and m.events == w.events[: len(m.events)]
            ):
                return True
        return False

    return TraceProperty(accepts, f"{pi.name}-zp", pi.alphabet)


# ---------------------------------------------------------------------------
# Textual serialization: one event per line, deterministic.


def format_trace(m: TracePrefix) -> str:
    lines = [str(e) for e in m.events]
    if m.terminator == TERMINATED:
        lines.append("END")
    elif isinstance(m.terminator, Undef):
        lines.append(str(m.terminator))
    return "\n".join(lines) + ("\n" if lines else "")


class TraceFormatError(ValueError):
    pass


def parse_trace(text: str) -> TracePrefix:
    events: list[Event] = []
    terminator: object = None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    for i, line in enumerate(lines):
        parts = line.split()
        if terminator is not None:
            raise TraceFormatError(f"line {i+1}: events after terminator")
        try:
            if parts[0] == "CALL":
                dst, proc = parts[2].split(".", 1)
                events.append(ecall(int(parts[1]), int(dst), proc, int(parts[3])))
            elif parts[0] == "RET":
                events.append(eret(int(parts[1]), int(parts[2]), int(parts[3])))
            elif parts[0] == "UNDEF":
                terminator = Undef(int(parts[1]))
            elif parts[0] == "END":
                terminator = TERMINATED
            else:
                raise TraceFormatError(f"line {i+1}: unknown record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, TraceFormatError):
                raise
            raise TraceFormatError(f"line {i+1}: malformed record {line!r}") from exc
    return TracePrefix(tuple(events), terminator)


# ---------------------------------------------------------------------------
# Interface (de)serialization, used by the CLI.


def interface_to_json(interface: ProgramInterface, names: Sequence[str] | None = None) -> dict:
    comps = []
    for iface in interface.interfaces:
        entry = {
            "id": iface.component,
            "exports": sorted(iface.exports),
            "imports": [[c, p] for c, p in sorted(iface.imports)],
        }
        if names is not None:
            entry["name"] = names[iface.component]
        comps.append(entry)
    return {"main": [interface.main[0], interface.main[1]], "components": comps}


def interface_from_json(data: dict) -> tuple[ProgramInterface, list[str]]:
    comps = sorted(data["components"], key=lambda c: c["id"])
    interfaces = tuple(
        Interface(
            c["id"],
            frozenset(c["exports"]),
            frozenset((int(t), p) for t, p in c["imports"]),
        )
        for c in comps
    )
    names = [c.get("name", f"C{c['id']}" if c["id"] != ENV else "E") for c in comps]
    main = (int(data["main"][0]), data["main"][1])
    return ProgramInterface(interfaces, main), names
