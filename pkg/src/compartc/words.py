"""64-bit two's-complement machine integers."""

WORD_BITS = 64
_MOD = 1 << WORD_BITS
_SIGN = 1 << (WORD_BITS - 1)

INT_MIN = -_SIGN
INT_MAX = _SIGN - 1


def wrap64(x: int) -> int:
    """Reduce x into signed 64-bit range with wraparound."""
    x &= _MOD - 1
    return x - _MOD if x >= _SIGN else x


def to_unsigned(x: int) -> int:
    return x & (_MOD - 1)
