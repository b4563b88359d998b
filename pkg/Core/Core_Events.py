from dataclasses import dataclass
from enum import Enum


class EventType(str, Enum):
    """Row types of the node status log."""

    CANDIDATE = "candidate"
    LEADER = "leader"
    FAILURE = "failure"
    SIMULATE_FAILURE = "simulate failure"
    SIMULATE_RECOVERY = "simulate recovery"


@dataclass(frozen=True)
class EventRecord:
    type: EventType
    node: int
    term: int
    frame: int

    def as_row(self):
        """(type, node, term, frame) - the events.csv column order."""
        return (self.type.value, self.node, self.term, self.frame)
