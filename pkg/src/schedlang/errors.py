from __future__ import annotations

RULES = {
    "R1": "sync needs a preceding shard",
    "R2": "distributed primitive needs world_size > 1",
    "R3": "static-graph primitive needs a preceding trace",
    "R4": "interface shape mismatch",
    "R5": "sharded dimension not divisible by world size",
}


class ScheduleError(ValueError):
    """A primitive could not be recorded or replayed."""

    def __init__(self, message: str, rule: str | None = None, index: int | None = None) -> None:
        super().__init__(message)
        self.rule = rule
        self.index = index


class RuleViolation(ScheduleError):
    def __init__(self, rule: str, message: str, index: int | None = None) -> None:
        super().__init__(f"{rule} ({RULES.get(rule, 'rule')}): {message}", rule, index)
        self.message = message

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RuleViolation):
            return NotImplemented
        return (self.rule, self.message, self.index) == (other.rule, other.message, other.index)

    def __hash__(self) -> int:
        return hash((self.rule, self.message, self.index))
