import json
import logging
import re
from dataclasses import dataclass, field, replace

from Core.Core_Formation import Vec2
from Core.Core_RaftReplica import (
    AddMember,
    LogEntry,
    Noop,
    PositionBatch,
    RaftReplica,
    RemoveMember,
)

logger = logging.getLogger(__name__)

HEADER_PATTERN = re.compile(r"^term=(\d+) voted_for=(\d+|none)$")


class RecordParseError(ValueError):
    """Corrupt persistent record text."""


# =========================================================
# COMMAND ENCODING
# =========================================================
def encode_command(command):
    """
    One-line JSON form of a log command.

    {"op":"noop"} | {"op":"add","node":N} | {"op":"remove","node":N}
    | {"op":"batch","moves":[[id,x,y],...]}
    """
    if isinstance(command, Noop):
        body = {"op": "noop"}
    elif isinstance(command, AddMember):
        body = {"op": "add", "node": command.node}
    elif isinstance(command, RemoveMember):
        body = {"op": "remove", "node": command.node}
    elif isinstance(command, PositionBatch):
        body = {"op": "batch", "moves": [[agent, pos.x, pos.y] for agent, pos in command.moves]}
    else:
        raise TypeError(f"Cannot encode command {command!r}")
    # repr-based float output round-trips exactly
    return json.dumps(body, separators=(",", ":"), allow_nan=False)


def decode_command(text):
    try:
        body = json.loads(text)
        op = body["op"]
        if op == "noop":
            return Noop()
        if op == "add":
            return AddMember(int(body["node"]))
        if op == "remove":
            return RemoveMember(int(body["node"]))
        if op == "batch":
            return PositionBatch(tuple((int(agent), Vec2(x, y)) for agent, x, y in body["moves"]))
    except (ValueError, KeyError, TypeError) as e:
        raise RecordParseError(f"Bad command encoding {text!r}: {e}") from e
    raise RecordParseError(f"Unknown command op {op!r}")


# =========================================================
# PERSISTENT RECORD
# =========================================================
@dataclass(frozen=True)
class PersistentRecord:
    """The state a replica must keep across a crash."""

    current_term: int = 0
    voted_for: int | None = None
    log: tuple = field(default_factory=tuple)

    def encode(self):
        """Header line plus one `<index> <term> <json>` line per entry, newline terminated."""
        vote = "none" if self.voted_for is None else str(self.voted_for)
        lines = [f"term={self.current_term} voted_for={vote}"]
        lines.extend(f"{e.index} {e.term} {encode_command(e.command)}" for e in self.log)
        return "\n".join(lines) + "\n"

    @classmethod
    def decode(cls, text):
        lines = text.splitlines()
        if not lines:
            raise RecordParseError("Empty record")

        header = HEADER_PATTERN.match(lines[0])
        if header is None:
            raise RecordParseError(f"Bad header line {lines[0]!r}")
        term = int(header.group(1))
        voted_for = None if header.group(2) == "none" else int(header.group(2))

        entries = []
        for number, line in enumerate(lines[1:], start=2):
            parts = line.split(" ", 2)
            if len(parts) != 3:
                raise RecordParseError(f"Line {number}: expected '<index> <term> <command>'")
            try:
                index, entry_term = int(parts[0]), int(parts[1])
            except ValueError as e:
                raise RecordParseError(f"Line {number}: {e}") from e
            if index != len(entries) + 1:
                raise RecordParseError(f"Line {number}: index {index} breaks contiguity")
            if entry_term < 1 or entry_term > term:
                raise RecordParseError(f"Line {number}: entry term {entry_term} outside 1..{term}")
            if entries and entry_term < entries[-1].term:
                raise RecordParseError(f"Line {number}: entry terms decrease")
            entries.append(LogEntry(entry_term, index, decode_command(parts[2])))

        return cls(term, voted_for, tuple(entries))


def persist(replica):
    return PersistentRecord(replica.current_term, replica.voted_for, tuple(replica.log))


def restore(record, node_id, members, timers, *, frame=0, auto_elect=True):
    """
    Rebuild a replica from its persistent record.

    Returns a Follower with volatile state reset; the configuration is
    recomputed from the restored log.
    """
    # pinned first timeouts only apply to a cold start
    timers = replace(timers, first_timeouts=())
    replica = RaftReplica(node_id, members, timers, frame=frame, auto_elect=auto_elect)
    replica.current_term = record.current_term
    replica.voted_for = record.voted_for
    replica.log = list(record.log)
    replica._refresh_members()
    logger.info("Node %s restored: term %s, %s log entries", node_id, record.current_term, len(record.log))
    return replica
