from .graph import NODE_KINDS, OPCODES, GraphBuilder, GraphError, GraphNode, StaticGraph
from .module import (
    BUILTIN_KINDS,
    COMPOSITE,
    InitSpec,
    ModelError,
    ModuleDef,
    ParamDef,
    ShardInfo,
    join_path,
    parent_path,
    path_matches,
    resolve_paths,
    shard_slice,
    split_path,
    unshard,
)
from .serialize import ModelFormatError, dump_model, load_model, structurally_equal
from .shapes import ShapeError, infer_module, infer_shapes, model_input_specs, trace_shapes
from .tensor import TensorSpec

__all__ = [
    "BUILTIN_KINDS", "COMPOSITE", "NODE_KINDS", "OPCODES", "GraphBuilder", "GraphError", "GraphNode",
    "InitSpec", "ModelError", "ModelFormatError", "ModuleDef", "ParamDef", "ShapeError", "ShardInfo",
    "StaticGraph", "TensorSpec", "dump_model", "infer_module", "infer_shapes", "join_path", "load_model",
    "model_input_specs", "parent_path", "path_matches", "resolve_paths", "shard_slice", "split_path",
    "structurally_equal", "trace_shapes", "unshard",
]
