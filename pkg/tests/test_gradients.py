import numpy as np
import pytest

from schedlang import zoo
from schedlang.config import WorldConfig
from schedlang.executor.runtime import backward, forward, run_sharded
from schedlang.ir import GraphBuilder, ModuleDef, resolve_paths
from schedlang.ir import library
from schedlang.ir.module import unshard
from schedlang.schedule import apply, create_schedule
from tests.conftest import central_diff, rng_inputs
from tests.gradcheck import (
    BUILTIN_CASES,
    H,
    OP_CASES,
    TOL,
    check_builtin,
    check_composite,
    check_op,
    composite_fixtures,
    weighted_model,
    with_values,
)

SEEDS = range(5)


@pytest.mark.parametrize("case", OP_CASES, ids=lambda c: f"{c.op}-{'x'.join(map(str, c.shapes[0]))}")
def test_kernel_vjp_matches_finite_differences(case):
    for seed in SEEDS:
        assert check_op(case, seed) < TOL


@pytest.mark.parametrize("kind", sorted(BUILTIN_CASES))
def test_builtin_gradients(kind):
    for seed in SEEDS:
        assert check_builtin(kind, seed) < TOL


@pytest.mark.parametrize("name", sorted(composite_fixtures()))
def test_composite_gradients(name):
    for seed in SEEDS:
        assert check_composite(name, seed) < TOL


def _sharded_vs_fd(wrapper: ModuleDef, sharded: ModuleDef, xs, world: int):
    res = run_sharded(sharded, xs, world, grads=True)

    def loss(m, args):
        return float(sum(np.sum(o) for o in forward(m, args).outputs))

    fd_in = central_diff(lambda x: loss(wrapper, [x]), xs[0].copy(), H)
    pairs = {f"input@{r}": (res.grads[r].inputs[0], fd_in) for r in range(world)}
    for path, pdef in sharded.all_params():
        full = wrapper.get(path.rpartition(".")[0]).param(pdef.name).full_value()
        fd = central_diff(lambda v, path=path: loss(with_values(wrapper, path, v), xs), full.copy(), H)
        pieces = [res.grads[r].params[path] for r in range(world)]
        got = unshard(pieces, pdef.shard) if pdef.shard else pieces[0]
        pairs[path] = (got, fd)
    scale = max(float(np.max(np.abs(fd))) for _, fd in pairs.values())
    for name, (got, fd) in pairs.items():
        assert np.max(np.abs(got - fd)) <= TOL * scale, name


def test_all_reduce_gradients_through_sharded_attention():
    model = zoo.toy_bert(num_layers=1, hidden=4, heads=2, ffn=6, seq=2, features=3, batch=1)
    wrapper = weighted_model(model, 0)
    sch = create_schedule(wrapper, WorldConfig(world_size=2))
    for p in resolve_paths(wrapper, "m.encoder.layer.*.attention.self.*"):
        if p.rpartition(".")[2] in ("query", "key", "value"):
            sch[p].shard(["weight", "bias"], axis=0)
    dense = resolve_paths(wrapper, "m.encoder.layer.*.attention.output.dense")[0]
    sch[dense].shard("weight", axis=1)
    sch[dense].sync("forward")
    sch[dense.rsplit(".", 2)[0] + ".self"].sync("backward")
    sharded = apply(sch).model
    assert any(n.op == "all_reduce" for _, m in sharded.walk() if m.forward for n in m.forward)
    _sharded_vs_fd(wrapper, sharded, rng_inputs(model, 3), 2)


def test_all_gather_gradients():
    lin = library.linear("lin", 3, 4, seed=2)
    g = GraphBuilder()
    x = g.input(shape=[2, 3])
    y = g.op("gelu", g.op("all_gather", g.call("lin", g.op("all_reduce", x, direction="backward")), axis=-1))
    model = ModuleDef("gather", submodules={"lin": lin}, forward=g.output(y))
    wrapper = weighted_model(model, 1)
    sch = create_schedule(wrapper, WorldConfig(world_size=2))
    sch["m.lin"].shard(["weight", "bias"], axis=0)
    sharded = apply(sch).model
    xs = [np.random.default_rng(4).standard_normal((2, 3))]
    # the gathered result is the unsharded forward on every rank
    want = forward(wrapper, xs).outputs[0]
    for rank in run_sharded(sharded, xs, 2).outputs:
        np.testing.assert_allclose(rank[0], want, atol=1e-12)
    _sharded_vs_fd(wrapper, sharded, xs, 2)


def test_checkpointed_gradients_equal_plain(small_bert):
    sch = create_schedule(small_bert)
    for p in resolve_paths(small_bert, "encoder.layer.*"):
        sch[p].checkpoint()
    ckpt = apply(sch).model
    xs = rng_inputs(small_bert, 11)
    a, b = backward(small_bert, xs, "train", 2), backward(ckpt, xs, "train", 2)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k]), k
