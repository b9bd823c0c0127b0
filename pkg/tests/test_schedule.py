import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schedlang import zoo
from schedlang.config import WorldConfig
from schedlang.costmodel import estimate
from schedlang.errors import RuleViolation, ScheduleError
from schedlang.executor.runtime import forward, run_sharded
from schedlang.ir import dump_model, library, structurally_equal
from schedlang.schedule import apply, create_schedule, make_pattern, pattern_from_graph
from schedlang.schedule.pipeline import origin_leaves
from tests.conftest import rng_inputs

W2 = WorldConfig(world_size=2)

LINEAR_GELU = [
    {"id": 0, "kind": "input"},
    {"id": 1, "kind": "call_module", "op": "Linear", "args": [0]},
    {"id": 2, "kind": "call_op", "op": "gelu", "args": [1]},
]
QKV = [{"id": 0, "kind": "input"}] + [
    {"id": i, "kind": "call_module", "op": "Linear", "target": t, "args": [0]}
    for i, t in ((1, "query"), (2, "key"), (3, "value"))
]
# BiasAdd -> Dropout -> ResidualAdd -> LayerNorm; params bind through pattern inputs
BDRL = [{"id": i, "kind": "input"} for i in range(5)] + [
    {"id": 5, "kind": "call_op", "op": "add", "args": [0, 1]},
    {"id": 6, "kind": "call_op", "op": "dropout", "args": [5]},
    {"id": 7, "kind": "call_op", "op": "add", "args": [6, 2]},
    {"id": 8, "kind": "call_op", "op": "layernorm", "args": [7, 3, 4]},
]


def _max_diff(a, b, xs, mode="verify", seed=0):
    return max(float(np.max(np.abs(x - y)))
               for x, y in zip(forward(a, xs, mode, seed).outputs, forward(b, xs, mode, seed).outputs))


def _ops(model, op):
    return [(p, n) for p, m in model.walk() if m.forward is not None for n in m.forward if n.op == op]


# -- create_schedule / apply ----------------------------------------------------

def test_default_schedule_children(toy_bert):
    assert sorted(create_schedule(toy_bert).children) == ["embeddings", "encoder", "pooler"]


def test_builtin_leaf_has_no_children(toy_bert):
    assert create_schedule(toy_bert)["pooler.dense"].children == {}


def test_identity_schedule(toy_bert):
    res = apply(create_schedule(toy_bert))
    assert structurally_equal(res.model, toy_bert)
    assert res.stages is None


# -- replace ----------------------------------------------------------------------

def test_replace_attention_core(small_bert):
    sch = create_schedule(small_bert)
    for s in sch.select("encoder.layer.*.attention.self.core"):
        s.replace("EfficientAttention")
    out = apply(sch).model
    assert out.get("encoder.layer.0.attention.self.core").kind == "EfficientAttention"
    for seed in range(5):
        assert _max_diff(small_bert, out, rng_inputs(small_bert, seed)) <= 1e-6


def test_replace_qkv_region_with_fused(small_bert):
    sch = create_schedule(small_bert)
    site = sch["encoder.layer.0.attention.self"]
    site.trace()
    matches = site.find(make_pattern("qkv", QKV))
    assert len(matches) == 1
    site.replace("FusedQKV", matches[0], name="qkv")
    out = apply(sch).model
    selfattn = out.get("encoder.layer.0.attention.self")
    assert sorted(selfattn.submodules) == ["core", "qkv"]
    old = small_bert.get("encoder.layer.0.attention.self")
    fused_w = selfattn.get("qkv").param("weight").full_value()
    hidden = old.get("query").param("weight").spec.shape[0]
    assert fused_w.shape == (3 * hidden, hidden)
    want = np.concatenate([old.get(k).param("weight").full_value() for k in ("query", "key", "value")], axis=0)
    assert np.array_equal(fused_w, want)
    for seed in range(3):
        assert _max_diff(small_bert, out, rng_inputs(small_bert, seed)) == 0.0


def test_replace_shape_mismatch_fails_before_mutation(small_bert):
    before = dump_model(small_bert)
    sch = create_schedule(small_bert)
    sch["pooler.dense"].replace(library.linear("dense", 8, 4))
    with pytest.raises(ScheduleError, match="shape|interface"):
        apply(sch)
    assert dump_model(small_bert) == before


# -- shard ------------------------------------------------------------------------

def test_shard_local_shape():
    model = zoo.mlp((2, 4, 3))
    sch = create_schedule(model, W2)
    sch["fc0"].shard("weight", axis=0)
    sch["fc0"].shard("bias", axis=0)
    pdef = apply(sch).model.get("fc0").param("weight")
    assert pdef.spec.shape == (2, 2)
    assert pdef.full_spec.shape == (4, 2)


def test_shard_indivisible():
    model = zoo.mlp((2, 5, 3))
    sch = create_schedule(model, W2)
    sch["fc0"].shard("weight", axis=0)
    with pytest.raises(ScheduleError, match="divisible"):
        apply(sch)


def test_shard_unknown_param():
    sch = create_schedule(zoo.mlp((2, 4, 3)), W2)
    sch["fc0"].shard("gamma", axis=0)
    with pytest.raises(ScheduleError, match="gamma"):
        apply(sch)


# -- sync -------------------------------------------------------------------------

def _fig3(model, world=W2):
    sch = create_schedule(model, world)
    for s in sch.select("encoder.layer.*.attention.self"):
        for k in ("query", "key", "value"):
            s[k].shard(["weight", "bias"], axis=0)
        s.sync("backward")
    for s in sch.select("encoder.layer.*.attention.output.dense"):
        s.shard("weight", axis=1)
        s.sync("forward")
    return sch


def test_fig3_recipe_one_all_reduce_after_out(small_bert):
    out = apply(_fig3(small_bert)).model
    attn = out.get("encoder.layer.0.attention")
    fwd = [(p, n) for p, n in _ops(attn, "all_reduce") if n.attrs["direction"] == "forward"]
    assert len(fwd) == 1
    path, node = fwd[0]
    graph = attn.get(path).forward
    assert graph.node(node.args[0]).target == "dense"


def test_fig3_recipe_matches_unsharded(small_bert):
    out = apply(_fig3(small_bert)).model
    xs = rng_inputs(small_bert, 1)
    want = forward(small_bert, xs).outputs
    for rank in run_sharded(out, xs, 2).outputs:
        for a, b in zip(rank, want):
            assert np.max(np.abs(a - b)) <= 1e-9


def test_sync_both_on_sharded_embeddings():
    model = zoo.embed_model()
    sch = create_schedule(model, W2)
    sch["embed"].shard("weight", axis=0)
    sch["embed"].sync("both")
    out = apply(sch).model
    dirs = sorted(n.attrs["direction"] for _, n in _ops(out, "all_reduce"))
    assert dirs == ["backward", "forward"]
    graph = out.forward
    embed_call = next(n for n in graph if n.target == "embed")
    assert graph.node(embed_call.args[0]).attrs.get("direction") == "backward"
    xs = [np.random.default_rng(0).integers(0, 10, (2, 5)).astype(np.float64)]
    np.testing.assert_array_equal(run_sharded(out, xs, 2).outputs[1][0], forward(model, xs).outputs[0])


def test_sync_without_shard_is_r1(small_bert):
    sch = create_schedule(small_bert, W2)
    sch["pooler"].sync("forward")
    with pytest.raises(RuleViolation) as info:
        apply(sch)
    assert info.value.rule == "R1"


def test_shard_on_single_worker_is_r2():
    sch = create_schedule(zoo.mlp((2, 4, 3)))
    sch["fc0"].shard("weight", axis=0)
    with pytest.raises(RuleViolation) as info:
        apply(sch)
    assert info.value.rule == "R2"


# -- checkpoint ---------------------------------------------------------------------

def test_checkpoint_subgraph_untraced_is_r3(small_bert):
    sch = create_schedule(small_bert)
    site = sch["encoder.layer.0.intermediate"]
    matches = site.find(make_pattern("lg", LINEAR_GELU))
    site.checkpoint(matches[0])
    with pytest.raises(RuleViolation) as info:
        apply(sch)
    assert info.value.rule == "R3"


def test_checkpoint_subgraph_traced(small_bert):
    sch = create_schedule(small_bert)
    site = sch["encoder.layer.0.intermediate"]
    site.trace()
    site.checkpoint(site.find(make_pattern("lg", LINEAR_GELU))[0])
    out = apply(sch).model
    xs = rng_inputs(small_bert, 2)
    assert _max_diff(small_bert, out, xs, "train", 3) == 0.0


def test_nested_checkpoint_rejected(small_bert):
    sch = create_schedule(small_bert)
    sch["encoder.layer.0"].checkpoint()
    sch["encoder.layer.0.attention"].checkpoint()
    with pytest.raises(ScheduleError, match="nested|checkpoint"):
        apply(sch)


# -- find / fuse ------------------------------------------------------------------

def test_find_linear_gelu_over_flattened_encoder(toy_bert):
    sch = create_schedule(toy_bert)
    sch["encoder"].trace(flatten=True)
    matches = sch["encoder"].find(make_pattern("lg", LINEAR_GELU))
    assert len(matches) == 24
    anchors = [m.anchor for m in matches]
    assert anchors == sorted(anchors)


def test_find_whole_graph_once(small_bert):
    sch = create_schedule(small_bert)
    core = sch["encoder.layer.1.attention.self.core"]
    core.trace()
    matches = core.find(pattern_from_graph("all", core.module.forward, core.module))
    assert len(matches) == 1


def test_find_by_name_glob(toy_bert):
    matches = create_schedule(toy_bert).find("encoder.layer.*.intermediate")
    assert len(matches) == 24


def _fused(model):
    sch = create_schedule(model)
    blk = sch["encoder.layer.0.output"]
    blk.trace()
    matches = blk.find(make_pattern("bdrl", BDRL))
    assert len(matches) == 1 and len(matches[0].nodes) == 4
    blk.fuse(matches[0])
    return apply(sch).model


def test_fuse_bdrl_collapses_to_one_call(small_bert):
    out = _fused(small_bert)
    graph = out.get("encoder.layer.0.output").forward
    assert not any(n.kind == "call_op" for n in graph)
    calls = [n for n in graph if n.kind == "call_module"]
    assert len(calls) == 2  # dense + fused


def test_fuse_launch_count_and_numerics(small_bert):
    out = _fused(small_bert)
    before, after = estimate(small_bert), estimate(out)
    assert before.launches - after.launches == 3
    assert before.flops == after.flops
    for seed in range(5):
        assert _max_diff(small_bert, out, rng_inputs(small_bert, seed), "train", seed) <= 1e-6


def test_fuse_unknown_backend(small_bert):
    sch = create_schedule(small_bert)
    blk = sch["encoder.layer.0.output"]
    blk.trace()
    with pytest.raises(ScheduleError, match="backend"):
        blk.fuse(blk.find(make_pattern("bdrl", BDRL))[0], backend="triton")


# -- pipeline -----------------------------------------------------------------------

def _split(model, *after):
    sch = create_schedule(model, W2)
    sch["encoder"].trace()
    for a in after:
        sch["encoder.layer"].pipeline_split(a)
    return apply(sch)


def test_fig5_two_stages(toy_bert):
    res = _split(toy_bert, "11")
    assert len(res.stages) == 2
    s0, s1 = (origin_leaves(s.module) for s in res.stages.stages)
    assert any(p.startswith("embeddings.") for p in s0)
    assert {p.split(".")[2] for p in s0 if p.startswith("encoder.")} == {str(i) for i in range(12)}
    assert {p.split(".")[2] for p in s1 if p.startswith("encoder.")} == {str(i) for i in range(12, 24)}
    assert any(p.startswith("pooler.") for p in s1)


def test_two_splits_three_stages(toy_bert):
    res = _split(toy_bert, "7", "15")
    assert len(res.stages) == 3


def test_split_at_missing_child(toy_bert):
    with pytest.raises(ScheduleError, match="99"):
        _split(toy_bert, "99")


def test_split_untraced_is_r3(toy_bert):
    sch = create_schedule(toy_bert, W2)
    sch["encoder.layer"].pipeline_split("11")
    with pytest.raises(RuleViolation) as info:
        apply(sch)
    assert info.value.rule == "R3"


def test_residual_crosses_stage_boundary(toy_bert):
    res = _split(toy_bert, "11")
    io0, io1 = (s.io for s in res.stages.stages)
    # the layer-11 output and the embedding output both feed stage 1
    assert len(io1.consumes) == 2
    assert set(io1.consumes) <= set(io0.produces)


@pytest.mark.parametrize("after", [("11",), ("3", "19"), ("0", "11", "22")])
def test_every_leaf_in_exactly_one_stage(toy_bert, after):
    res = _split(toy_bert, *after)
    seen = [p for s in res.stages.stages for p in origin_leaves(s.module)]
    assert sorted(seen) == sorted(toy_bert.leaf_paths())
    # stage order follows the original layer order
    layer_of = [max((int(p.split(".")[2]) for p in origin_leaves(s.module) if p.startswith("encoder.")), default=-1)
                for s in res.stages.stages]
    assert layer_of == sorted(layer_of)


# -- properties ---------------------------------------------------------------------

PRIMS = st.lists(st.sampled_from(["checkpoint", "trace", "replace", "fuse"]), min_size=1, max_size=4, unique=True)


def _random_schedule(model, prims, layer):
    sch = create_schedule(model)
    for prim in prims:
        if prim == "checkpoint":
            sch[f"encoder.layer.{layer}"].checkpoint()
        elif prim == "trace":
            sch["encoder.layer"].trace()
        elif prim == "replace":
            sch[f"encoder.layer.{layer}.attention.self.core"].replace("EfficientAttention")
        elif prim == "fuse":
            blk = sch[f"encoder.layer.{1 - layer}.output"]
            blk.trace()
            blk.fuse(blk.find(make_pattern("bdrl", BDRL))[0])
    return sch


@settings(max_examples=20, deadline=None)
@given(PRIMS, st.integers(0, 1), st.integers(0, 2 ** 16))
def test_semantics_preserved(small_bert, prims, layer, seed):
    out = apply(_random_schedule(small_bert, prims, layer)).model
    assert _max_diff(small_bert, out, rng_inputs(small_bert, seed), "train", seed) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(PRIMS, st.integers(0, 1))
def test_apply_is_pure_and_deterministic(small_bert, prims, layer):
    before = dump_model(small_bert)
    sch = _random_schedule(small_bert, prims, layer)
    a, b = apply(sch), apply(sch)
    assert dump_model(a.model) == dump_model(b.model)
    assert dump_model(small_bert) == before


@pytest.mark.parametrize("world", [2, 4])
def test_tensor_parallel_identity(world):
    model = zoo.two_linear()
    sch = create_schedule(model, WorldConfig(world_size=world))
    sch["qkv"].shard(["weight", "bias"], axis=0)
    sch["out"].shard("weight", axis=1)
    sch["out"].sync("forward")
    out = apply(sch).model
    for seed in range(5):
        xs = rng_inputs(model, seed)
        want = forward(model, xs).outputs[0]
        for rank in run_sharded(out, xs, world).outputs:
            assert np.max(np.abs(rank[0] - want)) <= 1e-9
