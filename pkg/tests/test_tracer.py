import numpy as np
import pytest

from schedlang import zoo
from schedlang.executor.runtime import forward
from schedlang.ir import GraphBuilder, ModuleDef, structurally_equal
from schedlang.ir import library
from schedlang.tracer import TraceError, TraceSpec, apply_trace, inline, trace
from tests.conftest import rng_inputs


def _call_targets(graph):
    return [n.target for n in graph if n.kind == "call_module"]


def test_leaves_stay_single_calls(toy_bert):
    traced = trace(toy_bert, "encoder", TraceSpec(("layer.*.attention.self.core",), flatten=True))
    targets = _call_targets(traced.graph)
    cores = [t for t in targets if t.endswith(".core")]
    assert len(cores) == 24
    # everything else is either a builtin leaf or was inlined
    for t in targets:
        mod = toy_bert.get("encoder").get(t)
        assert mod.is_builtin or t.endswith(".core")


def test_hierarchical_trace_mirrors_composite_children(toy_bert):
    traced = trace(toy_bert, "encoder.layer.0", TraceSpec())
    layer = toy_bert.get("encoder.layer.0")
    composites = {k for k, m in layer.submodules.items() if not m.is_builtin}
    assert set(traced.child_traces) == composites
    assert apply_trace(toy_bert, "encoder.layer.0", traced) is toy_bert


def test_selective_trace_leaves_siblings_untouched(small_bert):
    target = "encoder.layer.0.attention"
    traced = trace(small_bert, target, TraceSpec(flatten=True))
    out = apply_trace(small_bert, target, traced)
    assert out.get(target).forward != small_bert.get(target).forward
    for sibling in ("encoder.layer.0.intermediate", "encoder.layer.0.output", "encoder.layer.1.attention"):
        assert structurally_equal(out.get(sibling), small_bert.get(sibling))


def test_inline_one_node_callee_keeps_count():
    g = GraphBuilder()
    x = g.input()
    parent = g.output(g.op("relu", g.call("ident", x)))
    c = GraphBuilder()
    callee = c.output(c.op("scale", c.input(), factor=1.0))
    out = inline(parent, 1, callee)
    assert len(out) == len(parent)
    assert [n.op for n in out if n.kind == "call_op"] == ["scale", "relu"]


def test_inline_requalifies_param_targets():
    c = GraphBuilder()
    xin = c.input()
    callee = c.output(c.op("matmul", xin, c.param("weight"), transpose_b=True))
    g = GraphBuilder()
    parent = g.output(g.call("child", g.input()))
    out = inline(parent, 1, callee)
    assert [n.target for n in out if n.kind == "param_ref"] == ["child.weight"]


def test_inline_folds_get_items():
    c = GraphBuilder()
    a = c.input()
    callee = c.output(c.op("relu", a), c.op("gelu", a))
    g = GraphBuilder()
    call = g.call("pair", g.input())
    parent = g.output(g.op("add", g.item(call, 0), g.item(call, 1)))
    out = inline(parent, call, callee)
    assert not any(n.kind == "get_item" for n in out)
    add = [n for n in out if n.op == "add"][0]
    assert [out.node(a).op for a in add.args] == ["relu", "gelu"]


def test_inline_then_execute_is_bitwise_equal():
    model = zoo.toy_bert(num_layers=3)
    traced = trace(model, "", TraceSpec(flatten=True))
    flat = apply_trace(model, "", traced)
    assert all(model.get(t).is_builtin for t in _call_targets(flat.forward))
    for seed in range(10):
        xs = rng_inputs(model, seed)
        for a, b in zip(forward(model, xs).outputs, forward(flat, xs).outputs):
            assert np.max(np.abs(a - b)) == 0.0


def test_builtin_cannot_be_traced(toy_bert):
    with pytest.raises(TraceError, match="builtin"):
        trace(toy_bert, "pooler.dense")


def test_tied_parameter_across_boundary_rejected():
    from dataclasses import replace as dc_replace

    model = zoo.mlp((4, 4, 4))
    fc0 = model.get("fc0")
    tied_w = dc_replace(model.get("fc1").param("weight"), tied_to="wrap.fc0.weight")
    g = GraphBuilder()
    wrap = ModuleDef("wrap", submodules={"fc0": fc0}, forward=g.output(g.call("fc0", g.input())))
    fc1 = model.get("fc1").update(params=(tied_w, model.get("fc1").param("bias")))
    g = GraphBuilder()
    x = g.input(shape=[3, 4])
    root = ModuleDef("root", submodules={"wrap": wrap, "fc1": fc1},
                     forward=g.output(g.call("fc1", g.op("relu", g.call("wrap", x)))))
    with pytest.raises(TraceError, match="alias"):
        trace(root, "", TraceSpec(flatten=True))


