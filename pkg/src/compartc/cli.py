"""Command-line entry point for the whole chain.

    compartc compile prog.src -o prog.cpm
    compartc run source prog.src --fuel 100000 --input 1,2,3
    compartc run sfi prog.sfi --log run.jsonl --trace out.trace
    compartc backtranslate out.trace prog.iface.json -o replay.src
    compartc sfi-compile prog.cpm -o prog.sfi --offset-bits 12
    compartc mp-compile prog.cpm -o prog.mpi
    compartc test rscdcmd --backend sfi --variant 1 --seeds 500
    compartc test sfi-invariants --seeds 1000
    compartc test agreement --backend mp --seeds 500
    compartc generate --seed 7 -o random.src

Exit codes: 0 on success or an all-pass test batch, 1 on failures, 2 on
usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .backtrans import back_translate
from .compile import compile_program
from .gen import GenConfig, gen_program
from .harness import (
    BatchResult, run_batch, run_mutation_batch,
)
from .interp import run_source
from .machine import load_machine_program, mrun, render_disassembly, save_machine_program
from .micropolicy import load_mp_image, mp_compile, mp_run, save_mp_image
from .parser import ParseError, parse_source
from .sfi import (
    LayoutConfig, load_sfi_image, save_sfi_image, sfi_compile, sfi_run,
)
from .source import WellFormednessError, program_to_text
from .trace import (
    TracePrefix, Undef, format_trace, interface_from_json, interface_to_json,
    parse_trace,
)


def _parse_tape(text: str | None) -> tuple[int, ...]:
    if not text:
        return ()
    path = Path(text)
    if path.exists():
        text = path.read_text().replace(",", " ")
        return tuple(int(t) for t in text.split())
    return tuple(int(t) for t in text.split(","))


def _load_source(path: str):
    return parse_source(Path(path).read_text())


def _trace_json(trace: TracePrefix, outcome) -> str:
    term: object = None
    if trace.terminator == "END":
        term = "end"
    elif isinstance(trace.terminator, Undef):
        term = {"undef": trace.terminator.component}
    doc = {
        "events": [
            {"kind": e.kind, "src": e.src, "dst": e.dst, "proc": e.proc,
             "arg": e.arg}
            for e in trace.events
        ],
        "terminator": term,
        "outcome": {"kind": outcome.kind, "component": outcome.component,
                    "detail": outcome.detail},
    }
    return json.dumps(doc, indent=2)


def _emit_trace(args, trace: TracePrefix, outcome) -> None:
    text = _trace_json(trace, outcome) if args.json else format_trace(trace)
    sys.stdout.write(text if text.endswith("\n") or not text else text + "\n")
    if args.trace:
        Path(args.trace).write_text(format_trace(trace))


def _cmd_compile(args) -> int:
    program = _load_source(args.source)
    Path(args.output).write_bytes(save_machine_program(compile_program(program)))
    return 0


def _cmd_disasm(args) -> int:
    program = load_machine_program(Path(args.program).read_bytes())
    print(render_disassembly(program))
    return 0


def _cmd_run(args) -> int:
    tape = _parse_tape(args.input)
    if args.level == "source":
        program = _load_source(args.file)
        if tape:
            program = program.with_tape(tape)
        trace, outcome = run_source(program, args.fuel)
    elif args.level == "machine":
        program = load_machine_program(Path(args.file).read_bytes())
        trace, outcome = mrun(program, args.fuel, env_tape=tape)
    elif args.level == "sfi":
        image = load_sfi_image(Path(args.file).read_bytes())
        trace, log, outcome = sfi_run(image, args.fuel, tape)
        if args.log:
            Path(args.log).write_text(log.to_json_lines())
    else:
        image = load_mp_image(Path(args.file).read_bytes())
        trace, outcome = mp_run(image, args.fuel, tape)
    _emit_trace(args, trace, outcome)
    return 0


def _cmd_backtranslate(args) -> int:
    trace = parse_trace(Path(args.trace).read_text())
    interface, names = interface_from_json(
        json.loads(Path(args.interface).read_text()))
    program = back_translate(TracePrefix(trace.events), interface, names)
    text = program_to_text(program)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_interface(args) -> int:
    path = Path(args.program)
    if path.suffix == ".src":
        program = _load_source(args.program)
    else:
        program = load_machine_program(path.read_bytes())
    doc = interface_to_json(program.interface(), program.names())
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text)
    return 0


def _cmd_sfi_compile(args) -> int:
    program = load_machine_program(Path(args.program).read_bytes())
    cfg = LayoutConfig(offset_bits=args.offset_bits,
                       component_bits=args.component_bits)
    Path(args.output).write_bytes(save_sfi_image(sfi_compile(program, cfg)))
    return 0


def _cmd_mp_compile(args) -> int:
    program = load_machine_program(Path(args.program).read_bytes())
    Path(args.output).write_bytes(save_mp_image(mp_compile(program)))
    return 0


def _cmd_generate(args) -> int:
    cfg = GenConfig(seed=args.seed, undef_probability=args.undef_probability)
    source, machine = gen_program(cfg)
    text = program_to_text(source)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.bin:
        Path(args.bin).write_bytes(save_machine_program(machine))
    if source.env_tape:
        print(f"# input tape: {','.join(map(str, source.env_tape))}",
              file=sys.stderr)
    return 0


def _finish_batch(args, result: BatchResult) -> int:
    print(result.summary())
    for v in result.verdicts:
        if v.kind == "fail":
            print(f"  FAIL seed={v.seed} {v.reason}")
    if args.report_dir:
        from .report import write_report
        for path in write_report(result, args.report_dir):
            print(f"wrote {path}")
    if not args.report_dir and args.json_report:
        from .harness import verdicts_to_json
        print(verdicts_to_json(result))
    return 0 if result.ok() else 1


def _cmd_test(args) -> int:
    cfg = GenConfig(undef_probability=args.undef_probability)
    if args.suite == "rscdcmd":
        result = run_batch("rscdcmd", args.seeds, cfg, backend=args.backend,
                           variant=args.variant, jobs=args.jobs)
        return _finish_batch(args, result)
    if args.suite == "agreement":
        result = run_batch("agreement", args.seeds, cfg, backend=args.backend,
                           jobs=args.jobs)
        return _finish_batch(args, result)
    if args.suite == "sfi-invariants":
        result = run_batch("sfi-invariants", args.seeds, cfg, jobs=args.jobs)
        rc = _finish_batch(args, result)
        mutations = run_mutation_batch(args.mutation_seeds, cfg)
        print(mutations.summary())
        if args.report_dir:
            from .report import write_report
            for path in write_report(mutations, args.report_dir):
                print(f"wrote {path}")
        return 1 if (rc or not mutations.ok()) else 0
    raise AssertionError(args.suite)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compartc",
        description="Compartmentalizing compilation chain and testing harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile source to a machine program")
    p.add_argument("source")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=_cmd_compile)

    p = sub.add_parser("disasm", help="disassemble a machine program")
    p.add_argument("program")
    p.set_defaults(fn=_cmd_disasm)

    p = sub.add_parser("run", help="run a program at some level of the chain")
    p.add_argument("level", choices=("source", "machine", "sfi", "mp"))
    p.add_argument("file")
    p.add_argument("--fuel", type=int, default=1_000_000)
    p.add_argument("--input", help="environment tape: comma list or a file")
    p.add_argument("--trace", help="also write the trace to this file")
    p.add_argument("--log", help="write the SFI write/transfer log (JSON lines)")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("backtranslate",
                       help="build a source program replaying a trace prefix")
    p.add_argument("trace")
    p.add_argument("interface", help="program interface (JSON)")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=_cmd_backtranslate)

    p = sub.add_parser("interface",
                       help="print a program's interface as JSON")
    p.add_argument("program", help=".src or compiled machine program")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=_cmd_interface)

    p = sub.add_parser("sfi-compile", help="compile a machine program to an SFI image")
    p.add_argument("program")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--offset-bits", type=int, default=12)
    p.add_argument("--component-bits", type=int, default=None)
    p.set_defaults(fn=_cmd_sfi_compile)

    p = sub.add_parser("mp-compile",
                       help="compile a machine program to a tagged-machine image")
    p.add_argument("program")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=_cmd_mp_compile)

    p = sub.add_parser("generate", help="generate a random program")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--undef-probability", type=float, default=0.3)
    p.add_argument("-o", "--output")
    p.add_argument("--bin", help="also write the compiled machine program")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("test", help="run a property-test batch")
    tsub = p.add_subparsers(dest="suite", required=True)
    for suite in ("rscdcmd", "agreement", "sfi-invariants"):
        tp = tsub.add_parser(suite)
        tp.add_argument("--seeds", type=int, default=100)
        tp.add_argument("--jobs", type=int, default=1)
        tp.add_argument("--undef-probability", type=float, default=0.3)
        tp.add_argument("--report-dir", help="write JSON/CSV/PNG reports here")
        tp.add_argument("--json-report", action="store_true")
        if suite in ("rscdcmd", "agreement"):
            tp.add_argument("--backend", choices=("sfi", "mp"), default="sfi")
        if suite == "rscdcmd":
            tp.add_argument("--variant", type=int, choices=(1, 2), default=1)
        if suite == "sfi-invariants":
            tp.add_argument("--mutation-seeds", type=int, default=200)
        tp.set_defaults(fn=_cmd_test, suite=suite)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ParseError, WellFormednessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and fail
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
