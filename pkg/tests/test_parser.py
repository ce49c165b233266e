import pytest

from compartc.parser import ParseError, parse_source
from compartc.source import (
    Assign, BinOp, CallExpr, Deref, Exit, If, IntLit, Local, Seq,
    program_to_text,
)
from compartc.values import TOP

from conftest import FIG6_TEXT


def test_fig6_parses_to_two_components(fig6_program):
    p = fig6_program
    assert len(p.components) == 2
    assert p.main == (1, "mainP")
    main_c = p.component(1)
    assert main_c.name == "MainC"
    assert main_c.interface.exports == {"mainP"}
    assert main_c.interface.imports == {(2, "p")}
    assert p.component(2).interface.imports == {(1, "mainP")}


def test_single_component_exit():
    p = parse_source("component M { proc main(_) { exit } }")
    assert len(p.components) == 1
    assert type(p.component(1).procedures["main"]) is Exit


def test_malformed_expression():
    with pytest.raises(ParseError):
        parse_source("component M { proc main(_) { 1 + } }")


def test_error_carries_position():
    try:
        parse_source("component M {\n  proc main(_) { 1 + }\n}")
    except ParseError as exc:
        assert exc.line == 2
        assert exc.col > 0
    else:
        pytest.fail("no error raised")


def test_local_index_sugar():
    p = parse_source("component M { buffers {0,0}; proc main(_) { local[1] } }")
    body = p.component(1).procedures["main"]
    assert body == Deref(BinOp("+", Local(), IntLit(1)))


def test_increment_sugar():
    p = parse_source("component M { buffers {0}; proc main(_) { local[0]++ } }")
    body = p.component(1).procedures["main"]
    assert body == Assign(Local(), BinOp("+", Deref(Local()), IntLit(1)))


def test_zero_argument_call_sugar():
    p = parse_source("""
component M { import E.read; proc main(_) { E.read() } }
""")
    assert p.component(1).procedures["main"] == CallExpr(0, "read", IntLit(0))


def test_if_without_else_defaults_to_zero():
    p = parse_source("component M { proc main(_) { if (1) { 2 } } }")
    assert p.component(1).procedures["main"] == If(IntLit(1), IntLit(2), IntLit(0))


def test_comments_and_trailing_semicolons():
    p = parse_source("""
// whole-line comment
component M {
  buffers {0};  // trailing comment
  proc main(_) { local[0] := 3; exit; }
}
""")
    body = p.component(1).procedures["main"]
    assert type(body) is Seq and type(body.second) is Exit


def test_buffers_forms():
    p = parse_source("component M { buffers {0, ?, -4}, [2]; proc main(_) { exit } }")
    bufs = p.component(1).buffers
    assert bufs[0] == (0, TOP, -4)
    assert bufs[1] == (TOP, TOP)


def test_buffer_size_must_be_positive():
    with pytest.raises(ParseError):
        parse_source("component M { buffers [0]; proc main(_) { exit } }")


def test_duplicate_component_name():
    with pytest.raises(ParseError):
        parse_source("component M { proc main(_){exit} } component M { }")


def test_reserved_environment_name():
    with pytest.raises(ParseError):
        parse_source("component E { proc main(_){exit} }")


def test_unknown_component_reference():
    with pytest.raises(ParseError):
        parse_source("component M { proc main(_) { Ghost.p(1) } }")


def test_missing_main():
    with pytest.raises(ParseError):
        parse_source("component M { proc helper(_) { 1 } }")


def test_input_directive():
    p = parse_source("""
main M.go;
input 4, -2, 9;
component M { proc go(_) { exit } }
""")
    assert p.env_tape == (4, -2, 9)


def test_precedence():
    p = parse_source("component M { proc main(_) { 1 + 2 * 3 == 7 } }")
    body = p.component(1).procedures["main"]
    assert body == BinOp("=", BinOp("+", IntLit(1),
                                    BinOp("*", IntLit(2), IntLit(3))),
                         IntLit(7))


def test_print_parse_roundtrip(fig6_program):
    assert parse_source(program_to_text(fig6_program)) == fig6_program
