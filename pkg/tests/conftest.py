import numpy as np
import pytest
from hypothesis import strategies as st

from s3nas.cost import ModelShape
from s3nas.space import DimensionKind as K, Subspace, sample_uniform, uniform_space

TOY_SHAPE = ModelShape(side=16, channels=1, patch=2, classes=3)  # stage sides 8, 4, 2, 1


def toy_space():
    """Small space whose windows tile every stage of TOY_SHAPE."""
    s = uniform_space((1, 2), (8, 12), (1, 1.5), (1, 2), (1, 2), (4, 8))
    return s.replace(Subspace(K.WINDOW_SIZE, 4, (1,), 1))


@pytest.fixture
def space():
    return toy_space()


@pytest.fixture
def shape():
    return TOY_SHAPE


@st.composite
def spaces(draw):
    """Random small spaces; every stage gets its own choice sets."""
    def choices(lo, hi, n_max=3, scale=1):
        vals = draw(st.lists(st.integers(lo, hi), min_size=1, max_size=n_max, unique=True))
        return tuple(sorted(v * scale for v in vals))

    subs = []
    for i in range(1, 5):
        subs += [
            Subspace(K.DEPTH, i, choices(1, 3), 1),
            Subspace(K.EMBED_DIM, i, choices(1, 4, scale=4), 4),
            Subspace(K.MLP_RATIO, i, tuple(v / 2 for v in choices(1, 6)), 0.5),
            Subspace(K.WINDOW_SIZE, i, choices(1, 4), 1),
            Subspace(K.NUM_HEADS, i, choices(1, 3), 1),
            Subspace(K.QKV_DIM, i, (12,) if draw(st.booleans()) else (6, 12), 6),
        ]
    from s3nas.space import SearchSpace

    return SearchSpace(tuple(subs))


@st.composite
def archs(draw, space_strategy=spaces()):
    sp = draw(space_strategy)
    seed = draw(st.integers(0, 2 ** 32 - 1))
    return sp, sample_uniform(sp, np.random.default_rng(seed))


# one line per acceptance criterion, repeated in the terminal summary so it
# survives output capture
CRITERIA: list[str] = []


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
