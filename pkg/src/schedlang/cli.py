"""``slapo`` command line.

Exit codes: 0 ok, 1 usage or parse error, 2 schedule rule violation,
3 numerical verification failure, 4 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
import traceback
from pathlib import Path
from typing import Sequence

from . import costmodel
from .config import Config, ConfigError, load_config, with_world_size
from .errors import RuleViolation, ScheduleError
from .executor.dump import dump_tensors, format_tensors
from .executor.engine import ExecutionError
from .executor.runtime import forward, run_sharded
from .ir.module import ModelError, ModuleDef
from .ir.serialize import dump_model, load_model
from .ir.shapes import model_input_specs
from .schedule import ApplyResult, apply, create_schedule
from .schedule.script import run_script
from .tuner import TuneError, best_fragment, coordinate_descent, exhaustive, load_space, render_script
from .verifier import run_scheduled, standard_normal_inputs, validate_rules, verify_end_to_end

EXIT_OK, EXIT_USAGE, EXIT_RULE, EXIT_NUMERIC, EXIT_INTERNAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        raise UsageError(f"{self.prog}: {message}")


def derive_seed(seed: int, label: str) -> int:
    """Subsystem seed from the single user seed and a fixed label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _read_model(path: str) -> ModuleDef:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc.strerror}") from None
    return load_model(text)


def _read_text(path: str, what: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from None


def _config(args: argparse.Namespace) -> Config:
    return with_world_size(load_config(args.config), args.world_size)


def _schedule(model: ModuleDef, script: str | None, cfg: Config) -> ApplyResult:
    sch = create_schedule(model, cfg.world)
    if script is not None:
        run_script(sch, _read_text(script, "schedule"))
    return apply(sch)


def _inputs(model: ModuleDef, seed: int, batch: int | None = None):
    return standard_normal_inputs(derive_seed(seed, "inputs"), model_input_specs(model, batch))


# -- commands -------------------------------------------------------------

def cmd_inspect(args: argparse.Namespace) -> int:
    model = _read_model(args.model)
    for path, mod in model.walk():
        depth = path.count(".") + 1 if path else 0
        label = path.rsplit(".", 1)[-1] if path else model.name
        flags = [f"{k}={v}" for k, v in sorted(mod.attrs.items()) if k in ("checkpoint", "fused", "pipeline_splits")]
        print("  " * depth + f"{label} ({mod.kind})" + (" [" + ", ".join(flags) + "]" if flags else ""))
        for p in mod.params:
            shard = f" shard(axis={p.shard.axis}, world={p.shard.world_size})" if p.shard else ""
            tied = f" tied_to={p.tied_to}" if p.tied_to else ""
            print("  " * (depth + 1) + f"- {p.name}: {list(p.spec.shape)} {p.spec.dtype}{shard}{tied}")
    specs = model_input_specs(model)
    print("inputs: " + ", ".join(str(s) for s in specs))
    return EXIT_OK


def cmd_apply(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = _read_model(args.model)
    result = _schedule(model, args.schedule, cfg)
    out = Path(args.output) if args.output else Path(args.model).with_suffix(".scheduled.json")
    out.write_text(dump_model(result.model))
    print(f"wrote {out}")
    if result.stages is not None:
        for i, stage in enumerate(result.stages.stages):
            mod = stage.module.update(attrs={**stage.module.attrs, "stage_index": i,
                                             "stage_consumes": list(stage.io.consumes),
                                             "stage_produces": list(stage.io.produces)})
            path = out.with_name(out.name.replace(".json", "") + f".stage{i}.json")
            path.write_text(dump_model(mod))
            print(f"wrote {path}  consumes={','.join(stage.io.consumes)} produces={','.join(stage.io.produces)}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = _read_model(args.model)
    sch = create_schedule(model, cfg.world)
    run_script(sch, _read_text(args.schedule, "schedule"))
    violations = validate_rules(sch)
    if violations:
        for v in violations:
            print(f"record {v.index}: {v}")
        print("phase 1: FAIL")
        return EXIT_RULE
    print("phase 1: PASS")
    result = apply(sch)
    trials = args.trials if args.trials is not None else cfg.verify.trials
    try:
        report = verify_end_to_end(model, result, cfg.world, trials, cfg.verify.atol, cfg.verify.rtol,
                                   seed=derive_seed(args.seed, "verify"), micro_batches=args.micro_batches,
                                   grads=args.grads)
    except ExecutionError as exc:
        # e.g. a shard that leaves a downstream op with mismatched shapes
        print(f"phase 2: FAIL (scheduled model does not execute: {exc})")
        return EXIT_NUMERIC
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = _read_model(args.model)
    result = _schedule(model, args.schedule, cfg)
    rep = costmodel.estimate(result.model, args.batch, args.micro_batches, cfg.world, result.stages,
                             args.checkpoint_ratio, args.layers)
    print("\n".join(rep.lines()))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = _read_model(args.model)
    mode = "train" if args.train else "verify"
    dropout_seed = derive_seed(args.seed, "dropout")
    xs = _inputs(model, args.seed, args.batch)
    if args.schedule is not None:
        result = _schedule(model, args.schedule, cfg)
        outs = run_scheduled(result, xs, cfg.world, args.micro_batches, mode, dropout_seed)
    else:
        worlds = {p.shard.world_size for _, p in model.all_params() if p.shard is not None}
        if len(worlds) > 1:
            raise ModelError(f"parameters are sharded for different world sizes {sorted(worlds)}")
        world = worlds.pop() if worlds else 1
        if args.world_size is not None and world > 1 and args.world_size != world:
            raise ModelError(f"model is sharded for world size {world}, not {args.world_size}")
        if world > 1:
            outs = run_sharded(model, xs, world, mode, dropout_seed).rank0
        else:
            outs = forward(model, xs, mode, dropout_seed).outputs
    tensors = [(0, o) for o in outs]
    text = format_tensors(tensors)
    if args.dump:
        Path(args.dump).write_bytes(dump_tensors(tensors))
        Path(args.dump + ".txt").write_text(text)
        print(f"wrote {args.dump} and {args.dump}.txt")
    print(text, end="")
    return EXIT_OK


def _tune_objective(model: ModuleDef, template: str, cfg: Config, settings: dict):
    layers = settings.get("layers")
    default_batch = settings.get("batch")

    def objective(a: dict) -> costmodel.CostReport:
        text = render_script(template, a)
        if "checkpoint_ratio" in a:
            if not layers:
                raise TuneError("checkpoint_ratio needs settings.layers in the space file")
            paths = costmodel.layer_paths(model, layers)
            text += "".join(f"checkpoint {p}\n" for p in paths[:costmodel.checkpointed_layers(len(paths), a["checkpoint_ratio"])])
        sch = create_schedule(model, cfg.world)
        run_script(sch, text)
        result = apply(sch)
        return costmodel.estimate(result.model, a.get("batch", default_batch), a.get("micro_batches", 1),
                                  cfg.world, result.stages)

    return objective


def cmd_tune(args: argparse.Namespace) -> int:
    cfg = _config(args)
    model = _read_model(args.model)
    space_file = load_space(args.space)
    template = _read_text(args.schedule, "schedule") if args.schedule else ""
    objective = _tune_objective(model, template, cfg, space_file.settings)
    if args.algo == "exhaustive":
        res = exhaustive(space_file.space, objective)
    else:
        res = coordinate_descent(space_file.space, objective, derive_seed(args.seed, "tuner"), args.restarts)
    log = "".join(f"trial {i}: {t.line()}\n" for i, t in enumerate(res.trials))
    if args.log:
        Path(args.log).write_text(log)
    print(log, end="")
    print(f"explored {len(res.trials)} of {res.feasible_count} feasible configurations")
    print(f"best: {res.best.line()}")
    if res.all_zero:
        print("warning: every explored configuration scored 0 (out of memory)")
    layers = []
    a = res.best.assignment
    if "checkpoint_ratio" in a:
        paths = costmodel.layer_paths(model, space_file.settings["layers"])
        layers = paths[:costmodel.checkpointed_layers(len(paths), a["checkpoint_ratio"])]
    fragment = best_fragment(res, template, layers)
    if args.output:
        Path(args.output).write_text(fragment)
    print(fragment, end="")
    return EXIT_OK


# -- entry ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slapo", description="Apply, verify, cost and tune schedules for model files.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="TOML file with [world], [cost] and [verify] sections")
        sp.add_argument("--world-size", type=int, help="number of simulated workers")
        sp.add_argument("--seed", type=int, default=0, help="root seed; every random stream derives from it")

    sp = sub.add_parser("inspect", help="print the module tree with parameter shapes")
    sp.add_argument("model")
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("apply", help="apply a schedule script and write the transformed model")
    sp.add_argument("model")
    sp.add_argument("schedule")
    sp.add_argument("-o", "--output", help="output model file (default: <model>.scheduled.json)")
    common(sp)
    sp.set_defaults(fn=cmd_apply)

    sp = sub.add_parser("verify", help="rule validation plus sampled numerical equivalence")
    sp.add_argument("model")
    sp.add_argument("schedule")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--micro-batches", type=int, default=1)
    sp.add_argument("--grads", action="store_true", help="also compare parameter gradients")
    common(sp)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("estimate", help="print the cost report of a (scheduled) model")
    sp.add_argument("model")
    sp.add_argument("schedule", nargs="?")
    sp.add_argument("--batch", type=int)
    sp.add_argument("--micro-batches", type=int, default=1)
    sp.add_argument("--checkpoint-ratio", type=float)
    sp.add_argument("--layers", help="module whose children are the layers for --checkpoint-ratio")
    common(sp)
    sp.set_defaults(fn=cmd_estimate)

    sp = sub.add_parser("run", help="execute the forward pass on seeded inputs")
    sp.add_argument("model")
    sp.add_argument("schedule", nargs="?")
    sp.add_argument("--batch", type=int)
    sp.add_argument("--micro-batches", type=int, default=1)
    sp.add_argument("--train", action="store_true", help="training mode (dropout active)")
    sp.add_argument("--dump", help="write outputs as a binary tensor dump (plus <path>.txt)")
    common(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("tune", help="search schedule knobs against the cost model")
    sp.add_argument("model")
    sp.add_argument("space", help="tuning space file (TOML)")
    sp.add_argument("schedule", nargs="?", help="schedule template; ${var} and ?var lines are filled in")
    sp.add_argument("--algo", choices=("exhaustive", "cd"), default="exhaustive")
    sp.add_argument("--restarts", type=int, default=3)
    sp.add_argument("--log", help="also write the trials log here")
    sp.add_argument("-o", "--output", help="write the best schedule fragment here")
    common(sp)
    sp.set_defaults(fn=cmd_tune)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuleViolation as exc:
        print(f"rule violation: {exc}", file=sys.stderr)
        return EXIT_RULE
    except ScheduleError as exc:
        if exc.rule is not None:
            print(f"rule violation: {exc}", file=sys.stderr)
            return EXIT_RULE
        print(f"schedule error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, TuneError, ConfigError, ExecutionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # noqa: BLE001 - last-resort boundary
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
