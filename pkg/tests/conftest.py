import random

import pytest

from compartc.parser import parse_source
from compartc.trace import TracePrefix, Undef, ecall, eret

FIG6_TEXT = """
main MainC.mainP;

component MainC {
  import C.p;
  export mainP;
  buffers {0};
  proc mainP(_) {
    if (local[0] == 0) { local[0]++; C.p(0); MainC.mainP(0) }
    else { if (local[0] == 1) { local[0]++; C.p(2); MainC.mainP(0) }
    else { exit } }
  }
}

component C {
  import MainC.mainP;
  export p;
  buffers {0};
  proc p(_) {
    if (local[0] == 0) { local[0]++; 1 }
    else { if (local[0] == 1) { local[0]++; MainC.mainP(3); C.p(0) }
    else { exit } }
  }
}
"""

# the four-event trace the program above produces: MainC=1, C=2
FIG6_EVENTS = (
    ecall(1, 2, "p", 0),
    eret(2, 1, 1),
    ecall(1, 2, "p", 2),
    ecall(2, 1, "mainP", 3),
)


@pytest.fixture(scope="session")
def fig6_program():
    return parse_source(FIG6_TEXT)


@pytest.fixture(scope="session")
def fig6_trace():
    return TracePrefix(FIG6_EVENTS)


def random_prefix(rng: random.Random, max_len: int = 12,
                  n_components: int = 4) -> TracePrefix:
    """Arbitrary syntactically valid prefix (not necessarily well-bracketed)."""
    events = []
    for _ in range(rng.randrange(max_len + 1)):
        src = rng.randrange(n_components)
        dst = rng.choice([c for c in range(n_components) if c != src])
        if rng.random() < 0.5:
            events.append(ecall(src, dst, f"p{rng.randrange(3)}", rng.randrange(-5, 6)))
        else:
            events.append(eret(src, dst, rng.randrange(-5, 6)))
    terminator = rng.choice([None, None, None, "END",
                             Undef(rng.randrange(1, n_components))])
    if terminator == "END":
        from compartc.trace import TERMINATED
        terminator = TERMINATED
    return TracePrefix(tuple(events), terminator)
