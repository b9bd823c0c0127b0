from .core import ApplyResult, PrimitiveRecord, Schedule, apply, create_schedule, replay
from .matcher import Pattern, SubgraphMatch, make_pattern, parse_pattern, pattern_from_graph
from .pipeline import PipelineStagePlan, Stage, StageIO, partition_model

__all__ = [
    "ApplyResult", "PrimitiveRecord", "Schedule", "apply", "create_schedule", "replay",
    "Pattern", "SubgraphMatch", "make_pattern", "parse_pattern", "pattern_from_graph",
    "PipelineStagePlan", "Stage", "StageIO", "partition_model",
]
