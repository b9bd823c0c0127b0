import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from schedlang import zoo
from schedlang.config import WorldConfig
from schedlang.costmodel import estimate
from schedlang.tuner import (
    SearchSpace,
    SymbolicVar,
    TuneError,
    compile_expr,
    coordinate_descent,
    enumerate_space,
    exhaustive,
    parse_space,
    render_script,
)
from tests.tunerbench import synthetic_case, triangle_91


def test_rectangle_count():
    space = SearchSpace([SymbolicVar("bs", [2, 4]), SymbolicVar("ckpt", [0, 0.5, 1])])
    assert len(enumerate_space(space)) == 6


def test_constraint_prunes_one():
    space = SearchSpace([SymbolicVar("bs", [2, 4]), SymbolicVar("ckpt", [0, 0.5, 1])],
                        [lambda a: a["bs"] != 4 or a["ckpt"] >= 0.5])
    points = enumerate_space(space)
    assert len(points) == 5
    assert {"bs": 4, "ckpt": 0} not in points


def test_enumeration_is_lexicographic():
    space = SearchSpace([SymbolicVar("a", [3, 1]), SymbolicVar("b", ["x", "y"])])
    assert [(p["a"], p["b"]) for p in enumerate_space(space)] == [(3, "x"), (3, "y"), (1, "x"), (1, "y")]


def test_dependent_candidates_make_a_polygon():
    # larger batches need more checkpointing
    space = SearchSpace([
        SymbolicVar("bs", [8, 16, 24, 32]),
        SymbolicVar("ckpt", lambda a: [r / 4 for r in range(5) if r / 4 >= (a["bs"] - 8) / 32]),
    ])
    points = enumerate_space(space)
    per_bs = {bs: sorted(p["ckpt"] for p in points if p["bs"] == bs) for bs in (8, 16, 24, 32)}
    assert [len(v) for v in per_bs.values()] == [5, 4, 3, 2]
    rectangle = set(itertools.product((8, 16, 24, 32), (0, 0.25, 0.5, 0.75, 1.0)))
    assert {(p["bs"], p["ckpt"]) for p in points} < rectangle


def test_candidates_must_be_distinct_and_nonempty():
    with pytest.raises(TuneError, match="duplicate"):
        SymbolicVar("a", [1, 1])
    with pytest.raises(TuneError, match="no candidates"):
        SymbolicVar("a", [])


def test_exhaustive_unimodal():
    space = SearchSpace([SymbolicVar("bs", [2, 4, 6])])
    res = exhaustive(space, lambda a: -(a["bs"] - 4) ** 2)
    assert res.best.assignment == {"bs": 4}
    assert len(res.trials) == 3


def test_all_zero_space_flagged():
    space = SearchSpace([SymbolicVar("bs", [2, 4]), SymbolicVar("m", [1, 2])])
    res = exhaustive(space, lambda a: 0.0)
    assert res.all_zero
    assert res.best.assignment == {"bs": 2, "m": 1} and res.best.objective == 0.0


def test_all_oom_with_cost_model():
    tiny = WorldConfig(device_memory_bytes=10)
    model = zoo.two_linear(batch=8)
    space = SearchSpace([SymbolicVar("m", [1, 2, 4])])
    res = exhaustive(space, lambda a: estimate(model, micro_batches=a["m"], world=tiny))
    assert res.all_zero and res.best.assignment == {"m": 1}
    assert res.best.report.oom
    assert "oom=true" in res.best.line()


def test_trial_count_equals_enumeration():
    space = triangle_91()
    assert len(exhaustive(space, lambda a: a["bs"]).trials) == len(enumerate_space(space)) == 91


def test_empty_space_is_an_error():
    space = SearchSpace([SymbolicVar("a", [1, 2])], [lambda a: False])
    with pytest.raises(TuneError):
        exhaustive(space, lambda a: 1.0)
    with pytest.raises(TuneError):
        coordinate_descent(space, lambda a: 1.0)


def test_ties_go_to_first_assignment():
    space = SearchSpace([SymbolicVar("a", [5, 1, 3])])
    assert exhaustive(space, lambda a: 1.0).best.assignment == {"a": 5}
    assert coordinate_descent(space, lambda a: 1.0, seed=4).best.assignment == {"a": 5}


def _separable_grid(n1, n2, p1, p2):
    space = SearchSpace([SymbolicVar("bs", list(range(n1))), SymbolicVar("ckpt", list(range(n2)))])
    return space, lambda a: -abs(a["bs"] - p1) - 2 * (a["ckpt"] - p2) ** 2


@pytest.mark.parametrize("n1, n2", [(4, 4), (5, 7), (10, 10)])
def test_cd_separable_matches_exhaustive_and_explores_less(n1, n2):
    rng = random.Random(n1 * 31 + n2)
    for _ in range(5):
        space, f = _separable_grid(n1, n2, rng.randrange(n1), rng.randrange(n2))
        best = exhaustive(space, f).best
        assert coordinate_descent(space, f, seed=rng.randrange(100)).best.assignment == best.assignment
        # a single descent reads two lines through the grid, never all of it
        one = coordinate_descent(space, f, seed=rng.randrange(100), restarts=1)
        assert one.best.assignment == best.assignment
        assert len(one.trials) < n1 * n2


def test_one_variable_cd_equals_exhaustive():
    space = SearchSpace([SymbolicVar("x", list(range(9)))])
    f = lambda a: -(a["x"] - 6) ** 2  # noqa: E731
    ex, cd = exhaustive(space, f), coordinate_descent(space, f, seed=3)
    assert cd.best.assignment == ex.best.assignment
    assert sorted(t.assignment["x"] for t in cd.trials) == list(range(9))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_cd_never_evaluates_infeasible_points(seed, restarts):
    case = synthetic_case(seed % 50 + 1)
    seen = []

    def objective(a):
        assert case.space.feasible(a)
        seen.append(tuple(sorted(a.items())))
        return case.objective(a)

    res = coordinate_descent(case.space, objective, seed=seed, restarts=restarts)
    assert len(seen) == len(set(seen)) == len(res.trials) <= case.feasible


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_cd_is_deterministic(seed):
    case = synthetic_case(seed % 20)
    a = coordinate_descent(case.space, case.objective, seed=seed)
    b = coordinate_descent(case.space, case.objective, seed=seed)
    assert [t.assignment for t in a.trials] == [t.assignment for t in b.trials]
    assert a.best == b.best


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10_000))
def test_cd_matches_exhaustive_on_separable_polygons(seed):
    case = synthetic_case(seed)
    assert case.feasible <= 200
    want = exhaustive(case.space, case.objective).best.assignment
    assert coordinate_descent(case.space, case.objective, seed=seed).best.assignment == want


# -- space files --------------------------------------------------------------

SPACE = """
format_version = 1
[settings]
layers = "encoder.layer"
[[var]]
name = "batch"
candidates = [8, 16, 24, 32]
[[var]]
name = "checkpoint_ratio"
expr = "[r / 4 for r in range(5) if r / 4 >= (batch - 8) / 32]"
[[constraint]]
expr = "batch * (1 - checkpoint_ratio) <= 10"
"""


def test_parse_space_file():
    sf = parse_space(SPACE)
    assert sf.settings == {"layers": "encoder.layer"}
    points = enumerate_space(sf.space)
    assert all(p["batch"] * (1 - p["checkpoint_ratio"]) <= 10 for p in points)
    assert {"batch": 8, "checkpoint_ratio": 0.0} in points
    # allowed by the candidate expression, pruned by the constraint
    assert {"batch": 16, "checkpoint_ratio": 0.25} not in points
    assert {"batch": 16, "checkpoint_ratio": 0.5} in points


def test_fixture_space_file(fixtures_dir):
    from schedlang.tuner import load_space

    assert len(enumerate_space(load_space(fixtures_dir / "space.toml").space)) == 16


@pytest.mark.parametrize("text, msg", [
    ("format_version = 2\n[[var]]\nname='a'\ncandidates=[1]\n", "format"),
    ("[[var]]\nname='a'\n", "exactly one"),
    ("[[var]]\nname='a'\ncandidates=[1]\nexpr='[1]'\n", "exactly one"),
    ("[[var]]\nname='a'\nexpr='__import__(\"os\")'\n", "may be called"),
    ("[[var]]\nname='a'\nexpr='a.b'\n", "not allowed"),
    ("[other]\n", "unknown"),
    ("", "no variables"),
    ("[[var]\n", "bad tuning space"),
])
def test_space_file_errors(text, msg):
    with pytest.raises(TuneError, match=msg):
        parse_space(text)


def test_expression_sandbox():
    f = compile_expr("max(x, 3) + len([1, 2])", "t")
    assert f({"x": 1}) == 5
    with pytest.raises(TuneError):
        compile_expr("open('x')", "t")


def test_render_script_toggles_and_substitutes():
    tpl = "format_version 1\n?fuse fuse encoder.layer.*.output at bdrl\npipeline_split encoder.layer after=${split}\n"
    assert render_script(tpl, {"fuse": False, "split": 11}) == "format_version 1\npipeline_split encoder.layer after=11\n"
    assert "fuse encoder" in render_script(tpl, {"fuse": True, "split": 3})
    with pytest.raises(TuneError, match="unknown variable"):
        render_script(tpl, {"fuse": True})
