import pytest
from hypothesis import given, strategies as st

from cnn2c.codegen import UnrollLevel, plan_unroll
from cnn2c.codegen.loops import Ix, Loop


def test_full_unroll_of_2x3():
    plan = plan_unroll([2, 3], UnrollLevel.full())
    assert plan.straight_line and plan.for_loops == 0 and plan.body_instances == 6


def test_keep_outer_one_of_2x3():
    plan = plan_unroll([2, 3], UnrollLevel.keep(1))
    assert plan.rolled == (True, False)
    assert plan.body_instances == 3


def test_no_unroll_of_2x3():
    plan = plan_unroll([2, 3], UnrollLevel.none())
    assert plan.for_loops == 2 and plan.body_instances == 1


@given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.integers(0, 8))
def test_plan_keeps_outermost_loops(extents, n):
    level = UnrollLevel(n)
    plan = plan_unroll(extents, level)
    kept = min(n, len(extents))
    assert plan.rolled == tuple(i < kept for i in range(len(extents)))
    product = 1
    for e in extents[kept:]:
        product *= e
    assert plan.body_instances == product


@pytest.mark.parametrize("text, keep", [("none", None), ("full", 0), ("outer:1", 1), ("OUTER:3", 3)])
def test_parse(text, keep):
    level = UnrollLevel.parse(text)
    assert level.keep_outer == keep
    assert UnrollLevel.parse(str(level)) == level


@pytest.mark.parametrize("text", ["outer:0", "outer:", "half", "outer:-1", ""])
def test_parse_rejects(text):
    with pytest.raises(ValueError):
        UnrollLevel.parse(text)


def test_keep_needs_positive_count():
    with pytest.raises(ValueError):
        UnrollLevel.keep(0)


def test_affine_index_text():
    i, j = Ix.var("i"), Ix.var("j")
    assert str(i * 48 + j * 8 + 3) == "i*48 + j*8 + 3"
    assert str(Ix.lift(0)) == "0"
    assert str(i + (-2)) == "i - 2"
    assert int(Ix.lift(5) * 3 + 1) == 16
    with pytest.raises(ValueError):
        int(i)


def test_loop_header():
    assert Loop("k", 4).header() == "for (k = 0; k < 4; k++) {"
