"""Search spaces over schedule knobs, exhaustive search and randomized coordinate descent.

A space is a list of symbolic variables. A variable's candidates are either a
fixed list or a function of the earlier variables' values, so the feasible set
can be a polygon rather than a rectangle. Constraints prune further.
"""
from __future__ import annotations

import ast
import random
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import tomli

from .costmodel import CostReport

Assignment = dict[str, Any]
Objective = Callable[[Assignment], "float | CostReport"]

SPACE_FORMAT_VERSION = 1


class TuneError(ValueError):
    pass


@dataclass(frozen=True)
class SymbolicVar:
    name: str
    candidates: Sequence[Any] | Callable[[Mapping[str, Any]], Sequence[Any]]

    def __post_init__(self) -> None:
        if not callable(self.candidates):
            object.__setattr__(self, "candidates", tuple(self.candidates))
            _check_candidates(self.name, self.candidates)

    def values(self, partial: Mapping[str, Any]) -> tuple[Any, ...]:
        if not callable(self.candidates):
            return self.candidates
        vals = tuple(self.candidates(partial))
        _check_candidates(self.name, vals)
        return vals


def _check_candidates(name: str, vals: Sequence[Any]) -> None:
    if not vals:
        raise TuneError(f"variable {name!r} has no candidates")
    if len(set(map(repr, vals))) != len(vals):
        raise TuneError(f"variable {name!r} has duplicate candidates {list(vals)}")


@dataclass
class SearchSpace:
    vars: list[SymbolicVar]
    constraints: list[Callable[[Mapping[str, Any]], bool]] = field(default_factory=list)

    def __post_init__(self) -> None:
        names = [v.name for v in self.vars]
        if len(set(names)) != len(names):
            raise TuneError(f"duplicate variable names in {names}")

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.vars]

    def feasible(self, a: Mapping[str, Any]) -> bool:
        partial: dict[str, Any] = {}
        for v in self.vars:
            if v.name not in a or a[v.name] not in v.values(partial):
                return False
            partial[v.name] = a[v.name]
        return all(c(a) for c in self.constraints)


def _walk(space: SearchSpace, i: int, partial: Assignment) -> Iterator[Assignment]:
    if i == len(space.vars):
        if all(c(partial) for c in space.constraints):
            yield dict(partial)
        return
    var = space.vars[i]
    for val in var.values(partial):
        partial[var.name] = val
        yield from _walk(space, i + 1, partial)
    partial.pop(var.name, None)


def enumerate_space(space: SearchSpace) -> list[Assignment]:
    """All feasible assignments in lexicographic candidate order."""
    return list(_walk(space, 0, {}))


@dataclass
class TrialResult:
    assignment: Assignment
    objective: float
    report: CostReport | None = None

    def line(self) -> str:
        parts = [" ".join(f"{k}={v}" for k, v in self.assignment.items()), f"throughput={self.objective:.6g}"]
        if self.report is not None:
            parts += [f"memory={self.report.peak_memory_bytes}", f"oom={str(self.report.oom).lower()}"]
        return " ".join(parts)


@dataclass
class TuneResult:
    best: TrialResult
    trials: list[TrialResult]
    feasible_count: int
    # every evaluated configuration scored 0 (e.g. all out of memory)
    all_zero: bool = False


def _evaluate(objective: Objective, a: Assignment) -> TrialResult:
    out = objective(dict(a))
    if isinstance(out, CostReport):
        return TrialResult(dict(a), float(out.throughput_samples_per_s), out)
    return TrialResult(dict(a), float(out))


def _pick(trials: Sequence[TrialResult], order: Mapping[tuple, int], names: Sequence[str]) -> TrialResult:
    # highest objective; ties go to the earliest assignment in enumeration order
    return min(trials, key=lambda t: (-t.objective, order[_key(t.assignment, names)]))


def _key(a: Mapping[str, Any], names: Sequence[str]) -> tuple:
    return tuple(repr(a[n]) for n in names)


def exhaustive(space: SearchSpace, objective: Objective) -> TuneResult:
    feasible = enumerate_space(space)
    if not feasible:
        raise TuneError("search space has no feasible assignment")
    trials = [_evaluate(objective, a) for a in feasible]
    order = {_key(a, space.names): i for i, a in enumerate(feasible)}
    best = _pick(trials, order, space.names)
    return TuneResult(best, trials, len(feasible), all(t.objective == 0 for t in trials))


def coordinate_descent(space: SearchSpace, objective: Objective, seed: int = 0, restarts: int = 3) -> TuneResult:
    """Randomized coordinate descent with memoized evaluations.

    Each restart starts from a seeded random feasible point and sweeps the
    variables in a freshly shuffled order. Along one variable every feasible
    value (others fixed) is scored and the best is taken if it strictly
    improves; a sweep without improvement ends the restart.
    """
    feasible = enumerate_space(space)
    if not feasible:
        raise TuneError("search space has no feasible assignment")
    names = space.names
    order = {_key(a, names): i for i, a in enumerate(feasible)}
    rng = random.Random(seed)
    memo: dict[tuple, TrialResult] = {}
    explored: list[TrialResult] = []

    def score(a: Assignment) -> TrialResult:
        k = _key(a, names)
        if k not in memo:
            memo[k] = _evaluate(objective, a)
            explored.append(memo[k])
        return memo[k]

    def line(a: Assignment, name: str) -> list[Assignment]:
        return [b for b in feasible if all(b[n] == a[n] for n in names if n != name)]

    for _ in range(max(1, restarts)):
        cur = dict(rng.choice(feasible))
        best = score(cur)
        dims = list(names)
        rng.shuffle(dims)
        improved = True
        while improved:
            improved = False
            for d in dims:
                cand = _pick([score(b) for b in line(cur, d)], order, names)
                if cand.objective > best.objective:
                    cur, best, improved = dict(cand.assignment), cand, True
    top = _pick(explored, order, names)
    return TuneResult(top, explored, len(feasible), all(t.objective == 0 for t in explored))


# -- space files ----------------------------------------------------------

_SAFE_NODES = (
    ast.Expression, ast.BoolOp, ast.BinOp, ast.UnaryOp, ast.Compare, ast.IfExp, ast.Call, ast.Name, ast.Load,
    ast.Constant, ast.List, ast.Tuple, ast.ListComp, ast.comprehension, ast.Store, ast.Subscript, ast.Slice,
    ast.And, ast.Or, ast.Not, ast.USub, ast.UAdd, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod,
    ast.Pow, ast.Eq, ast.NotEq, ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.In, ast.NotIn,
)
_SAFE_FUNCS = {"range": range, "min": min, "max": max, "len": len, "abs": abs, "int": int, "float": float,
               "round": round}


def compile_expr(text: str, where: str) -> Callable[[Mapping[str, Any]], Any]:
    """A restricted arithmetic/comparison expression over variable names."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise TuneError(f"{where}: cannot parse {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _SAFE_NODES):
            raise TuneError(f"{where}: {type(node).__name__} is not allowed in {text!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _SAFE_FUNCS):
            raise TuneError(f"{where}: only {sorted(_SAFE_FUNCS)} may be called")
    code = compile(tree, where, "eval")

    def fn(env: Mapping[str, Any]) -> Any:
        try:
            # names go in globals so comprehensions can see them
            return eval(code, {**env, **_SAFE_FUNCS, "__builtins__": {}})
        except NameError as exc:
            raise TuneError(f"{where}: {exc}") from None

    return fn


@dataclass
class SpaceFile:
    space: SearchSpace
    settings: dict[str, Any]


def parse_space(text: str) -> SpaceFile:
    """Tuning space document (TOML)::

        format_version = 1
        [settings]            # optional: batch, layers, ...
        [[var]]
        name = "bs"
        candidates = [8, 16, 32]
        [[var]]
        name = "ckpt"
        expr = "[r / 4 for r in range(5) if r / 4 >= (bs - 8) / 32]"
        [[constraint]]
        expr = "bs * (1 - ckpt) <= 24"
    """
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise TuneError(f"bad tuning space file: {exc}") from None
    version = doc.pop("format_version", SPACE_FORMAT_VERSION)
    if version != SPACE_FORMAT_VERSION:
        raise TuneError(f"unsupported tuning space format {version!r}")
    unknown = set(doc) - {"var", "constraint", "settings"}
    if unknown:
        raise TuneError(f"unknown top-level keys {sorted(unknown)}")
    vars_: list[SymbolicVar] = []
    for i, spec in enumerate(doc.get("var", [])):
        where = f"var[{i}]"
        if set(spec) - {"name", "candidates", "expr"} or "name" not in spec:
            raise TuneError(f"{where}: expected name plus candidates or expr")
        if ("candidates" in spec) == ("expr" in spec):
            raise TuneError(f"{where} ({spec['name']}): give exactly one of candidates, expr")
        if "candidates" in spec:
            vars_.append(SymbolicVar(spec["name"], spec["candidates"]))
        else:
            vars_.append(SymbolicVar(spec["name"], compile_expr(spec["expr"], f"{where} ({spec['name']})")))
    constraints = []
    for i, spec in enumerate(doc.get("constraint", [])):
        if set(spec) != {"expr"}:
            raise TuneError(f"constraint[{i}]: expected a single expr")
        pred = compile_expr(spec["expr"], f"constraint[{i}]")
        constraints.append(lambda a, pred=pred: bool(pred(a)))
    if not vars_:
        raise TuneError("tuning space declares no variables")
    return SpaceFile(SearchSpace(vars_, constraints), dict(doc.get("settings", {})))


def load_space(path: str | Path) -> SpaceFile:
    return parse_space(Path(path).read_text())


# -- schedule knobs -------------------------------------------------------

KNOBS = ("batch", "micro_batches", "checkpoint_ratio")


def render_script(template: str, a: Mapping[str, Any]) -> str:
    """Substitute ``${var}`` and keep ``?var <line>`` lines only when ``var`` is truthy."""
    out = []
    for raw in template.splitlines():
        line = raw
        stripped = raw.lstrip()
        if stripped.startswith("?"):
            flag, _, rest = stripped[1:].partition(" ")
            if flag not in a:
                raise TuneError(f"script toggles on unknown variable {flag!r}")
            if not a[flag]:
                continue
            line = rest
        try:
            out.append(string.Template(line).substitute(a))
        except KeyError as exc:
            raise TuneError(f"script refers to unknown variable {exc.args[0]!r}") from None
    return "\n".join(out) + ("\n" if out else "")


def best_fragment(result: TuneResult, template: str = "", layers: list[str] | None = None) -> str:
    """The best assignment as a schedule-script fragment."""
    a = result.best.assignment
    lines = ["format_version 1", "# tuned: " + " ".join(f"{k}={v}" for k, v in a.items())]
    body = render_script(template, a).strip()
    if body:
        lines += [ln for ln in body.splitlines() if not ln.startswith("format_version")]
    lines += [f"checkpoint {p}" for p in layers or []]
    return "\n".join(lines) + "\n"
