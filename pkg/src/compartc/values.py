"""Runtime values shared by the source evaluator and the abstract machine.

Integers are plain Python ints kept in signed 64-bit range.  Pointers are
(component, block, offset) triples into the per-component block memory.
``TOP`` is the undefined value: it propagates through operations and only
causes undefined behavior when inspected.  Code pointers exist only at the
machine level (return addresses, jump targets).
"""

from __future__ import annotations

from dataclasses import dataclass

from .words import wrap64


class _Top:
    __slots__ = ()

    def __repr__(self):
        return "TOP"


TOP = _Top()


@dataclass(frozen=True, slots=True)
class Ptr:
    comp: int
    block: int
    off: int

    def __repr__(self):
        return f"Ptr({self.comp},{self.block},{self.off})"


@dataclass(frozen=True, slots=True)
class CodePtr:
    comp: int
    block: int
    off: int

    def __repr__(self):
        return f"CodePtr({self.comp},{self.block},{self.off})"


BINOPS = ("+", "-", "*", "=", "<", "<=")


def eval_binop(op: str, a, b):
    """Binary operation on values; ill-sorted combinations give TOP.

    Int x Int is 64-bit wraparound arithmetic (comparisons give 1/0).
    Ptr +/- Int shifts the offset.  Ptr = Ptr compares full triples.
    Ptr </<= Ptr is defined only within the same component and block.
    """
    ta, tb = type(a) is int, type(b) is int
    if ta and tb:
        if op == "+":
            return wrap64(a + b)
        if op == "-":
            return wrap64(a - b)
        if op == "*":
            return wrap64(a * b)
        if op == "=":
            return 1 if a == b else 0
        if op == "<":
            return 1 if a < b else 0
        if op == "<=":
            return 1 if a <= b else 0
        raise ValueError(f"unknown binop {op!r}")
    pa, pb = type(a) is Ptr, type(b) is Ptr
    if pa and tb and op in ("+", "-"):
        off = wrap64(a.off + b) if op == "+" else wrap64(a.off - b)
        return Ptr(a.comp, a.block, off)
    if ta and pb and op == "+":
        return Ptr(b.comp, b.block, wrap64(b.off + a))
    if pa and pb:
        if op == "=":
            return 1 if a == b else 0
        if op in ("<", "<="):
            if a.comp == b.comp and a.block == b.block:
                if op == "<":
                    return 1 if a.off < b.off else 0
                return 1 if a.off <= b.off else 0
            return TOP
    return TOP
