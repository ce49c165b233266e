"""Property-based testing of the whole chain.

The central test generates a whole program, compiles it through one of the
back ends, runs the low-level simulator to get a trace, and then checks
that the trace can be explained at the compartmentalized-machine level by
replacing components with their back-translations:

  variant 1: for each component participating in the trace (in order of
  first appearance, cumulatively), replace it with the compiled
  back-translation of the low-level trace and require the relinked run to
  either cover the low-level trace or end in undefined behavior blamed on
  a not-yet-replaced component;

  variant 2: replace, one discovery at a time, every component that
  exhibits undefined behavior, and require the final relinked run to
  reproduce the whole low-level trace with no undefined behavior left.

In both variants a replaced component must never be blamed for undefined
behavior; that is asserted on every iteration.

Failing cases are shrunk (fewer components, then smaller bodies) while
they keep failing, and reported with a replayable seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace as dc_replace

from .backtrans import back_translate
from .compile import compile_component, compile_program
from .gen import GenConfig, gen_program
from .interp import run_source
from .machine import MachineProgram, mrun
from .micropolicy import mp_compile, mp_run
from .sfi import (
    CapacityError, LayoutConfig, SfiImage, encode, sfi_check_invariants,
    sfi_compile, sfi_run,
)
from .flat import JUMP, NOP, STORE
from .source import (
    CallExpr, IntLit, SourceComponent, SourceProgram, WellFormednessError,
    check_source, program_to_text,
)
from .trace import ENV, TracePrefix, prec_blame, prefix_leq

DEFAULT_FUEL = 20_000
LOW_LEVEL_FACTOR = 10
TRACE_CAP = 128  # prefix length back-translated by the harness; any prefix
                 # of the low-level trace is a valid test instance

MUTATIONS = ("DropStoreMask", "DropJumpAlign", "SkipShadowPush", "SkipShadowPop")


class NoSiteError(Exception):
    """The image has no instrumentation site of the requested class."""


@dataclass(frozen=True)
class TestVerdict:
    kind: str                  # pass | fail | discard
    seed: int
    test: str
    reason: str = ""
    backend: str = ""
    variant: int = 0
    events: int = 0
    counterexample: str = ""   # shrunk source text, for fail verdicts

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "seed": self.seed, "test": self.test,
               "backend": self.backend, "variant": self.variant,
               "events": self.events}
        if self.reason:
            doc["reason"] = self.reason
        if self.counterexample:
            doc["counterexample"] = self.counterexample
        return doc


def _sfi_layout() -> LayoutConfig:
    # slot size 2^13: roomy enough for generated dispatchers
    return LayoutConfig(offset_bits=13)


def _backend_run(mach: MachineProgram, backend: str, fuel: int, tape):
    if backend == "sfi":
        image = sfi_compile(mach, _sfi_layout())
        trace, _log, outcome = sfi_run(image, fuel, tape)
        return trace, outcome
    image = mp_compile(mach)
    return mp_run(image, fuel, tape)


def _participants(events) -> list[int]:
    seen: list[int] = []
    for e in events:
        for c in (e.src, e.dst):
            if c != ENV and c not in seen:
                seen.append(c)
    return seen


# --- the RSC^DC^MD test -----------------------------------------------------


def _rscdcmd_once(src: SourceProgram, mach: MachineProgram, backend: str,
                  variant: int, fuel: int) -> tuple[str, str]:
    """Run the test procedure on one program: (verdict kind, reason)."""
    tape = src.env_tape
    low_trace, low_outcome = _backend_run(mach, backend, fuel * LOW_LEVEL_FACTOR, tape)
    if not low_trace.events:
        return "discard", "empty trace"
    m = TracePrefix(low_trace.events[:TRACE_CAP])
    interface = mach.interface()
    try:
        replacement = back_translate(m, interface)
    except WellFormednessError as exc:
        return "fail", f"low-level trace not back-translatable: {exc}"
    relink_fuel = max(4 * fuel, 40 * len(m.events) * (len(m.events) + 4))
    all_comps = set(range(1, len(mach.components) + 1))

    if variant == 1:
        replaced: set[int] = set()
        prog = mach
        for comp_id in _participants(m.events):
            repl = compile_component(replacement.component(comp_id))
            prog = prog.with_component(repl)
            replaced.add(comp_id)
            t_s, out_s = mrun(prog, relink_fuel, env_tape=replacement.env_tape)
            if out_s.kind == "undef" and out_s.component in replaced:
                return "fail", (f"blame: replaced component {out_s.component} "
                                f"has undefined behavior")
            if out_s.kind == "out_of_fuel" and not prefix_leq(m, t_s):
                return "discard", "relinked run out of fuel"
            if prefix_leq(m, t_s):
                continue
            if prec_blame(t_s, m, all_comps - replaced):
                continue
            return "fail", (f"after replacing {sorted(replaced)}: relinked "
                            f"trace neither covers the target nor blames "
                            f"the program side")
        return "pass", ""

    # variant 2: replace every undefined-behavior component, then reproduce
    replaced = set()
    prog = mach
    out_s = None
    t_s = None
    for _ in range(len(mach.components) + 1):
        t_s, out_s = mrun(prog, relink_fuel, env_tape=replacement.env_tape)
        if out_s.kind != "undef":
            break
        offender = out_s.component
        if offender in replaced:
            return "fail", (f"blame: replaced component {offender} still has "
                            f"undefined behavior")
        replaced.add(offender)
        prog = prog.with_component(
            compile_component(replacement.component(offender)))
    if out_s is None or out_s.kind == "undef":
        return "fail", "replacement did not eliminate undefined behavior"
    if out_s.kind == "out_of_fuel" and not prefix_leq(m, t_s):
        return "discard", "relinked run out of fuel"
    if not prefix_leq(m, t_s):
        return "fail", "relinked program does not reproduce the target trace"
    return "pass", ""


def run_rscdcmd_test(cfg: GenConfig, backend: str = "sfi", variant: int = 1,
                     fuel: int = DEFAULT_FUEL, shrink: bool = True) -> TestVerdict:
    src, mach = gen_program(cfg)
    kind, reason = _rscdcmd_once(src, mach, backend, variant, fuel)
    name = "rscdcmd"
    events = _trace_len(src, mach, backend, fuel)
    if kind != "fail":
        return TestVerdict(kind, cfg.seed, name, reason, backend, variant, events)
    shrunk = src
    if shrink:
        shrunk = shrink_program(
            src, lambda s: _rscdcmd_once(s, compile_program(s), backend,
                                         variant, fuel)[0] == "fail")
    return TestVerdict("fail", cfg.seed, name, reason, backend, variant,
                       events, program_to_text(shrunk))


def _trace_len(src, mach, backend, fuel) -> int:
    try:
        trace, _ = _backend_run(mach, backend, fuel * LOW_LEVEL_FACTOR, src.env_tape)
        return len(trace.events)
    except Exception:
        return -1


# --- back-end agreement -------------------------------------------------------


def _agreement_once(src: SourceProgram, mach: MachineProgram, backend: str,
                    fuel: int) -> tuple[str, str]:
    tape = src.env_tape
    t_m, out_m = mrun(mach, fuel, env_tape=tape)
    t_b, out_b = _backend_run(mach, backend, fuel * LOW_LEVEL_FACTOR, tape)
    if out_m.kind == "out_of_fuel" or out_b.kind == "out_of_fuel":
        return "discard", "out of fuel"
    if out_m.kind == "halted":
        if t_b == t_m:
            return "pass", ""
        return "fail", "traces differ on a defined program"
    # source-level undefined behavior: the low-level run extends the prefix
    if t_m.events != t_b.events[: len(t_m.events)]:
        return "fail", "low-level trace does not extend the defined prefix"
    if (backend == "mp" and out_b.kind == "violation"
            and len(t_b.events) == len(t_m.events)
            and out_b.component != out_m.component):
        return "fail", (f"violation at the divergence point blames "
                        f"{out_b.component}, machine blames {out_m.component}")
    return "pass", ""


def run_backend_agreement_test(cfg: GenConfig, backend: str = "sfi",
                               fuel: int = DEFAULT_FUEL,
                               shrink: bool = True) -> TestVerdict:
    src, mach = gen_program(cfg)
    kind, reason = _agreement_once(src, mach, backend, fuel)
    if kind != "fail":
        return TestVerdict(kind, cfg.seed, "agreement", reason, backend)
    shrunk = src
    if shrink:
        shrunk = shrink_program(
            src, lambda s: _agreement_once(s, compile_program(s), backend,
                                           fuel)[0] == "fail")
    return TestVerdict("fail", cfg.seed, "agreement", reason, backend,
                       counterexample=program_to_text(shrunk))


# --- compiler agreement (source vs compartmentalized machine) -----------------


def _compiler_once(src: SourceProgram, mach: MachineProgram,
                   fuel: int) -> tuple[str, str]:
    t_s, out_s = run_source(src, fuel)
    t_m, out_m = mrun(mach, fuel, env_tape=src.env_tape)
    if out_s.kind == "out_of_fuel" or out_m.kind == "out_of_fuel":
        return "discard", "out of fuel"
    if out_s.kind == "terminated":
        if out_m.kind == "halted" and t_s.events == t_m.events:
            return "pass", ""
        return "fail", "compiled trace differs from the source trace"
    # source undefined behavior: machine trace explains it or extends it
    if prefix_leq(TracePrefix(t_s.events), t_m):
        if out_m.kind == "undef" and len(t_m.events) == len(t_s.events) \
                and out_m.component != out_s.component:
            return "fail", "machine blames a different component"
        return "pass", ""
    if prec_blame(t_s, TracePrefix(t_m.events), {out_s.component}):
        return "pass", ""
    return "fail", "machine trace neither extends nor is explained by the source"


def run_compiler_agreement_test(cfg: GenConfig, fuel: int = DEFAULT_FUEL,
                                shrink: bool = True) -> TestVerdict:
    src, mach = gen_program(cfg)
    kind, reason = _compiler_once(src, mach, fuel)
    if kind != "fail":
        return TestVerdict(kind, cfg.seed, "compiler", reason)
    shrunk = src
    if shrink:
        shrunk = shrink_program(
            src, lambda s: _compiler_once(s, compile_program(s), fuel)[0] == "fail")
    return TestVerdict("fail", cfg.seed, "compiler", reason,
                       counterexample=program_to_text(shrunk))


# --- SFI invariants and instrumentation mutations ------------------------------


def run_sfi_invariants_test(cfg: GenConfig, fuel: int = DEFAULT_FUEL) -> TestVerdict:
    src, mach = gen_program(cfg)
    image = sfi_compile(mach, _sfi_layout())
    _trace, log, _outcome = sfi_run(image, fuel * LOW_LEVEL_FACTOR, src.env_tape)
    report = sfi_check_invariants(log, image.meta)
    if report.all_hold():
        return TestVerdict("pass", cfg.seed, "sfi-invariants")
    which = [name for name, ok in zip(
        ("write-isolation", "transfer-discipline", "stack-wellformed"),
        report.as_tuple()) if not ok]
    return TestVerdict("fail", cfg.seed, "sfi-invariants",
                       "violated: " + ", ".join(which),
                       counterexample=program_to_text(src))


def mutate_instrumentation(image: SfiImage, mutation: str) -> SfiImage:
    """Structurally apply one fault-injection class to every matching site."""
    if mutation not in MUTATIONS:
        raise ValueError(f"unknown mutation {mutation!r}")
    nop = encode(NOP)
    out = image.copy()
    mem = out.memory
    if mutation == "DropStoreMask":
        sites = image.meta["store_sites"]
        if not sites:
            raise NoSiteError("image has no store sites")
        for s in sites:
            mem[s["and"]] = nop
            mem[s["or"]] = nop
            mem[s["store"]] = encode(STORE, rs1=s["rp"], rs2=s["rs"])
    elif mutation == "DropJumpAlign":
        sites = image.meta["jump_sites"]
        if not sites:
            raise NoSiteError("image has no indirect jump sites")
        for s in sites:
            mem[s["const"]] = nop
            mem[s["and"]] = nop
            mem[s["or"]] = nop
            mem[s["jump"]] = encode(JUMP, rs1=s["r"])
    elif mutation == "SkipShadowPush":
        sites = image.meta["push_sites"]
        if not sites:
            raise NoSiteError("image has no entry push sites")
        for s in sites:
            mem[s["store"]] = nop
            mem[s["store"] + 1] = nop
            mem[s["store"] + 2] = nop
    else:  # SkipShadowPop
        sites = image.meta["pop_sites"]
        if not sites:
            raise NoSiteError("image has no return pop sites")
        for s in sites:
            mem[s["const"]] = nop
            mem[s["sub"]] = nop
    return out


def mutation_detected(cfg: GenConfig, mutation: str,
                      fuel: int = DEFAULT_FUEL) -> bool | None:
    """None when the image has no matching site; else whether a checker fails."""
    src, mach = gen_program(cfg)
    image = sfi_compile(mach, _sfi_layout())
    try:
        mutated = mutate_instrumentation(image, mutation)
    except NoSiteError:
        return None
    _trace, log, _outcome = sfi_run(mutated, fuel * LOW_LEVEL_FACTOR, src.env_tape)
    return not sfi_check_invariants(log, mutated.meta).all_hold()


# --- shrinking ----------------------------------------------------------------


def _drop_component(program: SourceProgram, cid: int) -> SourceProgram | None:
    """Remove component cid, rewriting calls to it and renumbering ids."""
    if cid == program.main[0]:
        return None
    idmap = {0: 0}
    for comp in program.components:
        if comp.cid < cid:
            idmap[comp.cid] = comp.cid
        elif comp.cid > cid:
            idmap[comp.cid] = comp.cid - 1

    def fix_expr(e):
        t = type(e)
        if t is CallExpr:
            if e.comp == cid:
                return IntLit(0)
            return CallExpr(idmap[e.comp], e.proc, fix_expr(e.arg))
        from .source import Alloc, Assign, BinOp, Deref, If, Seq
        if t is BinOp:
            return BinOp(e.op, fix_expr(e.left), fix_expr(e.right))
        if t is Seq:
            return Seq(fix_expr(e.first), fix_expr(e.second))
        if t is If:
            return If(fix_expr(e.cond), fix_expr(e.then), fix_expr(e.els))
        if t is Alloc:
            return Alloc(fix_expr(e.size))
        if t is Deref:
            return Deref(fix_expr(e.target))
        if t is Assign:
            return Assign(fix_expr(e.target), fix_expr(e.value))
        return e

    from .trace import Interface
    comps = []
    for comp in program.components:
        if comp.cid == cid:
            continue
        iface = Interface(
            idmap[comp.cid],
            comp.interface.exports,
            frozenset((idmap[d], p) for d, p in comp.interface.imports
                      if d != cid))
        comps.append(SourceComponent(
            iface, {p: fix_expr(b) for p, b in comp.procedures.items()},
            comp.buffers, comp.name))
    shrunk = SourceProgram(tuple(comps),
                           (idmap[program.main[0]], program.main[1]),
                           program.env_tape)
    return shrunk if not check_source(shrunk) else None


def _shrink_exprs(program: SourceProgram):
    """Candidate programs with one procedure body structurally reduced."""
    from .source import Seq
    for comp in program.components:
        for proc, body in comp.procedures.items():
            candidates = []
            if type(body) is Seq:
                candidates.append(body.second)
                candidates.append(body.first)
            if type(body) is not IntLit:
                candidates.append(IntLit(0))
            for cand in candidates:
                procs = dict(comp.procedures)
                procs[proc] = cand
                shrunk = program.with_component(
                    SourceComponent(comp.interface, procs, comp.buffers,
                                    comp.name))
                if not check_source(shrunk):
                    yield shrunk


def shrink_program(program: SourceProgram, still_fails,
                   max_rounds: int = 80) -> SourceProgram:
    """Greedy shrinking: fewer components first, then smaller bodies."""
    current = program
    for _ in range(max_rounds):
        improved = False
        for comp in list(current.components):
            candidate = _drop_component(current, comp.cid)
            if candidate is not None and _safe_fails(still_fails, candidate):
                current = candidate
                improved = True
                break
        if improved:
            continue
        for candidate in _shrink_exprs(current):
            if _safe_fails(still_fails, candidate):
                current = candidate
                improved = True
                break
        if not improved:
            break
    return current


def _safe_fails(still_fails, candidate) -> bool:
    try:
        return bool(still_fails(candidate))
    except Exception:
        return False


# --- batches -------------------------------------------------------------------


@dataclass
class BatchResult:
    test: str
    verdicts: list[TestVerdict]
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> int:
        return sum(1 for v in self.verdicts if v.kind == "pass")

    @property
    def failed(self) -> int:
        return sum(1 for v in self.verdicts if v.kind == "fail")

    @property
    def discarded(self) -> int:
        return sum(1 for v in self.verdicts if v.kind == "discard")

    @property
    def discard_rate(self) -> float:
        return self.discarded / max(len(self.verdicts), 1)

    def ok(self, max_discard_rate: float = 0.8) -> bool:
        # a near-all-discard batch is a generator configuration problem,
        # not a pass
        return self.failed == 0 and self.discard_rate <= max_discard_rate

    def summary(self) -> str:
        extra = "".join(f" {k}={v}" for k, v in self.detail.items())
        return (f"{self.test}: {self.passed} passed, {self.failed} failed, "
                f"{self.discarded} discarded{extra}")


def _run_one(args) -> TestVerdict:
    test, seed, cfg, backend, variant, fuel = args
    cfg = cfg.with_seed(seed)
    if test == "rscdcmd":
        return run_rscdcmd_test(cfg, backend, variant, fuel)
    if test == "agreement":
        return run_backend_agreement_test(cfg, backend, fuel)
    if test == "compiler":
        return run_compiler_agreement_test(cfg, fuel)
    if test == "sfi-invariants":
        return run_sfi_invariants_test(cfg, fuel)
    raise ValueError(f"unknown test {test!r}")


def run_batch(test: str, seeds: int, cfg: GenConfig | None = None,
              backend: str = "sfi", variant: int = 1,
              fuel: int = DEFAULT_FUEL, jobs: int = 1,
              seed_base: int = 0) -> BatchResult:
    cfg = cfg or GenConfig()
    work = [(test, seed_base + i, cfg, backend, variant, fuel)
            for i in range(seeds)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            verdicts = list(pool.map(_run_one, work, chunksize=8))
    else:
        verdicts = [_run_one(w) for w in work]
    return BatchResult(test, verdicts)


def run_mutation_batch(seeds: int, cfg: GenConfig | None = None,
                       fuel: int = DEFAULT_FUEL) -> BatchResult:
    """Each mutation class must be caught on at least one seed."""
    cfg = cfg or GenConfig()
    detected: dict[str, int | None] = {}
    verdicts = []
    for mutation in MUTATIONS:
        found = None
        for seed in range(seeds):
            hit = mutation_detected(cfg.with_seed(seed), mutation, fuel)
            if hit:
                found = seed
                break
        detected[mutation] = found
        verdicts.append(TestVerdict(
            "pass" if found is not None else "fail", found if found is not None else -1,
            "mutation", f"{mutation} detected at seed {found}" if found is not None
            else f"{mutation} not detected"))
    return BatchResult("mutation", verdicts, {"detected": detected})


def verdicts_to_json(result: BatchResult) -> str:
    doc = {
        "test": result.test,
        "passed": result.passed,
        "failed": result.failed,
        "discarded": result.discarded,
        "discard_rate": round(result.discard_rate, 4),
        "verdicts": [v.to_json() for v in result.verdicts],
    }
    doc.update(result.detail)
    return json.dumps(doc, indent=2, sort_keys=True, default=str)
