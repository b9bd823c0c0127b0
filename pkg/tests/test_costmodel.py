import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schedlang import zoo
from schedlang.config import CostConstants, WorldConfig
from schedlang.costmodel import (
    apply_checkpoint_ratio,
    checkpointed_layers,
    estimate,
    op_flops,
    param_bytes,
)
from schedlang.executor.runtime import forward
from schedlang.ir import GraphBuilder, ModuleDef, TensorSpec, library
from schedlang.schedule import apply, create_schedule
from tests.conftest import rng_inputs


def test_matmul_flops():
    assert op_flops("matmul", [TensorSpec((1, 2)), TensorSpec((2, 4))], TensorSpec((1, 4))) == 16


@pytest.mark.parametrize("op, per_elem", [("softmax", 5), ("layernorm", 8), ("relu", 1), ("add", 1),
                                          ("transpose", 0), ("all_reduce", 0)])
def test_op_flop_table(op, per_elem):
    out = TensorSpec((3, 5))
    assert op_flops(op, [out], out) == per_elem * 15


def test_two_linear_flops_by_hand():
    # qkv: 2*2*8*4 + bias 2*8; gelu 2*8; out: 2*2*4*8 + bias 2*4
    rep = estimate(zoo.two_linear())
    assert rep.forward_flops == 144 + 16 + 136
    assert rep.launches == 3
    assert rep.flops == 3 * rep.forward_flops  # backward counted as two forwards
    c = CostConstants()
    assert rep.step_time_s == pytest.approx(3 * 296 / c.device_flops_per_s + 6 * c.kernel_launch_overhead_s)


def test_memory_formula():
    model = zoo.two_linear()
    rep = estimate(model)
    params = (8 * 4 + 8 + 4 * 8 + 4) * 8
    assert rep.param_bytes == params
    assert rep.peak_memory_bytes == params * 4 + rep.activation_bytes


def _two_equal_stages(batch: int = 8):
    g = GraphBuilder()
    x = g.input(shape=[batch, 4])
    model = ModuleDef("seq", submodules={"a": library.linear("a", 4, 4, seed=1), "b": library.linear("b", 4, 4, seed=2)},
                      forward=g.output(g.call("b", g.call("a", x))))
    sch = create_schedule(model, WorldConfig(world_size=2))
    sch.trace()
    sch.pipeline_split("a")
    res = apply(sch)
    assert len(res.stages) == 2
    return model, res


def test_pipeline_formula_5t():
    model, res = _two_equal_stages()
    rep = estimate(res.model, micro_batches=4, stages=res.stages)
    g = GraphBuilder()
    one = ModuleDef("one", submodules={"a": library.linear("a", 4, 4)},
                    forward=g.output(g.call("a", g.input(shape=[2, 4]))))
    t = estimate(one).step_time_s
    assert rep.step_time_s == pytest.approx(5 * t, rel=1e-12)
    assert rep.stages == 2


def test_micro_batches_without_stages_accumulate():
    model = zoo.two_linear(batch=4)
    whole = estimate(model)
    split = estimate(model, micro_batches=2)
    assert split.forward_flops == whole.forward_flops
    assert split.step_time_s > whole.step_time_s  # twice the launches
    with pytest.raises(ValueError, match="micro-batches"):
        estimate(model, micro_batches=3)


def test_checkpoint_extremes(toy_bert):
    none = estimate(toy_bert, checkpoint_ratio=0.0, layers="encoder.layer")
    full = estimate(toy_bert, checkpoint_ratio=1.0, layers="encoder.layer")
    quarter = estimate(toy_bert, checkpoint_ratio=0.25, layers="encoder.layer")
    assert full.peak_memory_bytes < quarter.peak_memory_bytes < none.peak_memory_bytes
    assert full.flops > none.flops
    assert none.recompute_flops == 0 < quarter.recompute_flops < full.recompute_flops


def test_checkpoint_ratio_takes_first_layers():
    assert checkpointed_layers(24, 0.25) == 6
    assert checkpointed_layers(24, 0.3) == 7
    assert checkpointed_layers(3, 1.0) == 3
    model = apply_checkpoint_ratio(zoo.toy_bert(num_layers=4), "encoder.layer", 0.5)
    flags = [bool(model.get(f"encoder.layer.{i}").attrs.get("checkpoint")) for i in range(4)]
    assert flags == [True, True, False, False]
    with pytest.raises(ValueError):
        checkpointed_layers(4, 1.5)


RATIOS = st.sampled_from([i / 12 for i in range(13)])


@settings(max_examples=25, deadline=None)
@given(RATIOS, RATIOS)
def test_checkpoint_monotonicity(r1, r2):
    lo, hi = sorted((r1, r2))
    model = zoo.toy_bert(num_layers=12)
    a = estimate(model, checkpoint_ratio=lo, layers="encoder.layer")
    b = estimate(model, checkpoint_ratio=hi, layers="encoder.layer")
    assert b.peak_memory_bytes <= a.peak_memory_bytes
    assert b.recompute_flops >= a.recompute_flops
    if checkpointed_layers(12, hi) > checkpointed_layers(12, lo):
        assert b.peak_memory_bytes < a.peak_memory_bytes
        assert b.recompute_flops > a.recompute_flops


@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 1.0])
def test_activation_bytes_match_executor_ledger(small_bert, ratio):
    model = apply_checkpoint_ratio(small_bert, "encoder.layer", ratio)
    led = forward(model, rng_inputs(model)).ledger
    assert estimate(model).activation_bytes == led.total


def test_activation_bytes_match_ledger_after_fusion_and_replace(small_bert):
    sch = create_schedule(small_bert)
    for s in sch.select("encoder.layer.*.attention.self.core"):
        s.replace("EfficientAttention")
    sch["encoder.layer.1"].checkpoint()
    model = apply(sch).model
    assert estimate(model).activation_bytes == forward(model, rng_inputs(model)).ledger.total


def test_sharding_halves_local_param_bytes():
    model = zoo.two_linear()
    sch = create_schedule(model, WorldConfig(world_size=2))
    sch["qkv"].shard(["weight", "bias"], axis=0)
    sch["out"].shard("weight", axis=1)
    sch["out"].sync("forward")
    out = apply(sch).model
    for name in ("qkv.weight", "qkv.bias", "out.weight"):
        owner, _, p = name.rpartition(".")
        assert out.get(owner).param(p).spec.byte_size * 2 == model.get(owner).param(p).spec.byte_size
    assert param_bytes(out.get("qkv")) * 2 == param_bytes(model.get("qkv"))


def test_all_reduce_bytes_and_time():
    model = zoo.two_linear()
    sch = create_schedule(model, WorldConfig(world_size=2))
    sch["qkv"].shard(["weight", "bias"], axis=0)
    sch["out"].shard("weight", axis=1)
    sch["out"].sync("forward")
    out = apply(sch).model
    w = WorldConfig(world_size=2)
    rep, base = estimate(out, world=w), estimate(out)
    assert rep.collective_bytes == 2 * 4 * 8  # one (2, 4) f64 all-reduce
    assert rep.step_time_s - base.step_time_s == pytest.approx(2 * (2 - 1) / 2 * 64 / w.cost.link_bytes_per_s)


def test_oom_forces_zero_throughput(toy_bert):
    tiny = WorldConfig(device_memory_bytes=1000)
    rep = estimate(toy_bert, world=tiny)
    assert rep.oom and rep.throughput_samples_per_s == 0.0
    ok = estimate(toy_bert)
    assert not ok.oom and ok.throughput_samples_per_s > 0


def test_estimate_is_deterministic():
    a = estimate(zoo.mlp(batch=6))
    b = estimate(zoo.mlp(batch=6))
    assert a == b
    assert np.isfinite(a.step_time_s)
