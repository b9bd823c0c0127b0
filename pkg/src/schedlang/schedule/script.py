"""Schedule scripts: one primitive per line, ``#`` comments.

::

    format_version 1
    trace <path> [flatten=<bool>] [leaves=<p1,p2,...>]
    replace <path> with <library-module> [at <pattern-name>]
    shard <path> <param[,param]> axis=<0|1>
    sync <path> type=<forward|backward|both>
    checkpoint <path> [at <pattern-name>]
    pattern <name> { <node array in model-file syntax> }
    fuse <path> at <pattern-name> [backend=<name>]
    pipeline_split <path> after=<child-segment>

``.`` names the root module. Paths may contain globs; a glob line expands
to one primitive per matching module in sorted order.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import ScheduleError
from .core import Schedule
from .matcher import Pattern, PatternError, parse_pattern

FORMAT_VERSION = 1
COMMANDS = ("trace", "replace", "shard", "sync", "checkpoint", "pattern", "fuse", "pipeline_split")


class ScriptError(ScheduleError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Directive:
    line: int
    command: str
    path: str
    positional: tuple[str, ...]
    options: dict[str, str]
    body: str = ""


def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_script(text: str) -> list[Directive]:
    lines = text.splitlines()
    out: list[Directive] = []
    i = 0
    seen_directive = False
    while i < len(lines):
        lineno = i + 1
        raw = lines[i]
        line = raw.strip() if raw.strip().startswith("pattern") else _strip_comment(raw)
        i += 1
        if not line:
            continue
        head = line.split(None, 1)[0]
        if head == "format_version":
            if seen_directive:
                raise ScriptError(lineno, "format_version must come first")
            parts = line.split()
            if len(parts) != 2 or parts[1] != str(FORMAT_VERSION):
                raise ScriptError(lineno, f"unsupported schedule format {' '.join(parts[1:])!r}")
            seen_directive = True
            continue
        seen_directive = True
        if head == "pattern":
            text_block = line
            while text_block.count("{") > text_block.count("}") and i < len(lines):
                text_block += "\n" + lines[i]
                i += 1
            out.append(_parse_pattern(lineno, text_block))
            continue
        if head not in COMMANDS:
            raise ScriptError(lineno, f"unknown command {head!r}")
        tokens = line.split()
        if len(tokens) < 2:
            raise ScriptError(lineno, f"{head} needs a module path")
        positional, options = [], {}
        for tok in tokens[2:]:
            if "=" in tok:
                key, _, val = tok.partition("=")
                if not key or not val:
                    raise ScriptError(lineno, f"malformed option {tok!r}")
                if key in options:
                    raise ScriptError(lineno, f"option {key!r} given twice")
                options[key] = val
            else:
                positional.append(tok)
        path = "" if tokens[1] == "." else tokens[1]
        d = Directive(lineno, head, path, tuple(positional), options)
        _check_shape(d)
        out.append(d)
    return out


def _parse_pattern(lineno: int, block: str) -> Directive:
    head, _, rest = block.partition("{")
    parts = head.split()
    if len(parts) != 2 or not rest:
        raise ScriptError(lineno, "expected: pattern <name> { <nodes> }")
    if block.count("{") != block.count("}") or not rest.rstrip().endswith("}"):
        raise ScriptError(lineno, f"pattern {parts[1]}: unbalanced braces")
    return Directive(lineno, "pattern", parts[1], (), {}, rest.rstrip()[:-1])


_ALLOWED = {
    "trace": ({"flatten", "leaves"}, (0,)),
    "replace": (set(), (2, 4)),
    "shard": ({"axis"}, (1,)),
    "sync": ({"type"}, (0,)),
    "checkpoint": (set(), (0, 2)),
    "fuse": ({"backend"}, (2,)),
    "pipeline_split": ({"after"}, (0,)),
}


def _check_shape(d: Directive) -> None:
    opts, counts = _ALLOWED[d.command]
    unknown = set(d.options) - opts
    if unknown:
        raise ScriptError(d.line, f"{d.command}: unknown option(s) {sorted(unknown)}")
    if len(d.positional) not in counts:
        raise ScriptError(d.line, f"{d.command}: unexpected arguments {' '.join(d.positional)!r}")
    pos = d.positional
    if d.command == "replace" and (pos[0] != "with" or (len(pos) == 4 and pos[2] != "at")):
        raise ScriptError(d.line, "expected: replace <path> with <module> [at <pattern>]")
    if d.command in ("checkpoint", "fuse") and pos and pos[0] != "at":
        raise ScriptError(d.line, f"expected: {d.command} <path> at <pattern>")
    required = {"shard": "axis", "sync": "type", "pipeline_split": "after"}.get(d.command)
    if required and required not in d.options:
        raise ScriptError(d.line, f"{d.command} needs {required}=...")


def _bool(d: Directive, text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ScriptError(d.line, f"expected a boolean, got {text!r}")


def _targets(sch: Schedule, d: Directive) -> list[Schedule]:
    if any(ch in d.path for ch in "*?["):
        found = sch.select(d.path)
        if not found:
            raise ScriptError(d.line, f"path pattern {d.path!r} matches no module")
        return found
    try:
        return [sch[d.path]] if d.path else [sch]
    except KeyError:
        raise ScriptError(d.line, f"no module at {d.path!r}") from None


def _pattern(patterns: dict[str, Pattern], d: Directive, name: str) -> Pattern:
    if name not in patterns:
        raise ScriptError(d.line, f"pattern {name!r} is not defined above")
    return patterns[name]


def run_script(sch: Schedule, text: str) -> int:
    """Record every primitive in ``text`` on ``sch``; returns the number of records added."""
    before = len(sch.records)
    patterns: dict[str, Pattern] = {}
    for d in parse_script(text):
        if d.command == "pattern":
            try:
                patterns[d.path] = parse_pattern(d.path, d.body)
            except PatternError as exc:
                raise ScriptError(d.line, str(exc)) from None
            continue
        try:
            for target in _targets(sch, d):
                _run(target, d, patterns)
        except ScriptError:
            raise
        except ScheduleError as exc:
            raise ScriptError(d.line, str(exc)) from None
    return len(sch.records) - before


def _run(sch: Schedule, d: Directive, patterns: dict[str, Pattern]) -> None:
    o = d.options
    if d.command == "trace":
        leaves = [p for p in o.get("leaves", "").split(",") if p]
        sch.trace(leaves, _bool(d, o.get("flatten", "false")))
    elif d.command == "replace":
        library = d.positional[1]
        if len(d.positional) == 4:
            for m in sch.find(_pattern(patterns, d, d.positional[3])):
                sch.replace(library, m)
        else:
            sch.replace(library)
    elif d.command == "shard":
        try:
            axis = int(o["axis"])
        except ValueError:
            raise ScriptError(d.line, f"axis must be an integer, got {o['axis']!r}") from None
        sch.shard(d.positional[0].split(","), axis)
    elif d.command == "sync":
        sch.sync(o["type"])
    elif d.command == "checkpoint":
        if d.positional:
            for m in sch.find(_pattern(patterns, d, d.positional[1])):
                sch.checkpoint(m)
        else:
            sch.checkpoint()
    elif d.command == "fuse":
        backend = o.get("backend", "composed")
        for m in sch.find(_pattern(patterns, d, d.positional[1])):
            sch.fuse(m, backend)
    elif d.command == "pipeline_split":
        after = o["after"]
        sch.pipeline_split(int(after[1:]) if after.startswith("%") else after)
