import heapq
import logging
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from Core.Core_Events import EventRecord, EventType

logger = logging.getLogger(__name__)

# Seed stream tag for loss / jitter draws
NET_STREAM = 202

# Drop reasons recorded in the transcript
DROP_LOSS = "loss"
DROP_PARTITION = "partition"
DROP_SENDER_DOWN = "sender-down"
DROP_RECEIVER_DOWN = "receiver-down"


class FaultScheduleError(ValueError):
    """Inconsistent fault schedule."""


@dataclass(frozen=True)
class NetConfig:
    seed: int = 0
    base_delay: int = 1
    jitter: int = 0
    drop_probability: float = 0.0

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError(f"Seed must be non-negative, got {self.seed}")
        if self.base_delay < 1:
            raise ValueError(f"base_delay must be at least one frame, got {self.base_delay}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be non-negative, got {self.jitter}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError(f"drop_probability must lie in [0, 1], got {self.drop_probability}")


@dataclass(frozen=True)
class Envelope:
    sender: int
    to: int
    payload: Any
    send_frame: int
    deliver_frame: int
    seq: int


class NetEvent(NamedTuple):
    """One transcript line: kind is send / deliver / drop."""

    kind: str
    frame: int
    sender: int
    to: int
    seq: int
    reason: str = ""


# ========== FAULT ACTIONS ==========

@dataclass(frozen=True)
class CrashNode:
    node: int
    frame: int


@dataclass(frozen=True)
class RecoverNode:
    node: int
    frame: int


@dataclass(frozen=True)
class Partition:
    """Symmetric partition; nodes listed in no group share one implicit extra group."""

    groups: tuple
    frame: int

    def __post_init__(self):
        groups = tuple(frozenset(int(n) for n in group) for group in self.groups)
        seen = set()
        for group in groups:
            if not group:
                raise FaultScheduleError("Partition groups must not be empty")
            if seen & group:
                raise FaultScheduleError(f"Node(s) {sorted(seen & group)} listed in two partition groups")
            seen |= group
        object.__setattr__(self, "groups", groups)


@dataclass(frozen=True)
class Heal:
    frame: int


@dataclass(frozen=True)
class DropProbability:
    p: float
    frame: int

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise FaultScheduleError(f"Drop probability must lie in [0, 1], got {self.p}")


FAULT_ACTIONS = (CrashNode, RecoverNode, Partition, Heal, DropProbability)


class FaultSchedule:
    """
    Timed fault actions, stably sorted by frame.

    Raises:
        FaultScheduleError: negative frames, a recovery without a preceding
            crash, or a crash of a node that is already down
    """

    def __init__(self, actions=()):
        actions = list(actions)
        for action in actions:
            if not isinstance(action, FAULT_ACTIONS):
                raise FaultScheduleError(f"Unknown fault action {action!r}")
        actions.sort(key=lambda a: a.frame)

        down = set()
        for action in actions:
            if action.frame < 0:
                raise FaultScheduleError(f"Negative frame in {action!r}")
            if isinstance(action, CrashNode):
                if action.node in down:
                    raise FaultScheduleError(f"Node {action.node} crashed twice without recovery")
                down.add(action.node)
            elif isinstance(action, RecoverNode):
                if action.node not in down:
                    raise FaultScheduleError(f"RecoverNode({action.node}) without a preceding CrashNode")
                down.discard(action.node)

        self.actions = tuple(actions)
        self._by_frame = {}
        for action in self.actions:
            self._by_frame.setdefault(action.frame, []).append(action)

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __eq__(self, other):
        return isinstance(other, FaultSchedule) and self.actions == other.actions

    def __repr__(self):
        return f"FaultSchedule({list(self.actions)!r})"

    def actions_at(self, frame):
        return tuple(self._by_frame.get(frame, ()))

    def crash_windows(self):
        """(node, crash_frame, recover_frame | None) for every crash, in schedule order."""
        windows = []
        open_crash = {}
        for action in self.actions:
            if isinstance(action, CrashNode):
                open_crash[action.node] = len(windows)
                windows.append((action.node, action.frame, None))
            elif isinstance(action, RecoverNode):
                slot = open_crash.pop(action.node)
                node, start, _ = windows[slot]
                windows[slot] = (node, start, action.frame)
        return tuple(windows)


class SimNet:
    """
    Frame-stepped message transport.

    Envelopes wait in a heap keyed (deliver_frame, send_frame, sender, to, seq),
    which is also the delivery order inside a frame.
    """

    def __init__(self, config=None):
        self.config = config or NetConfig()
        self.drop_probability = self.config.drop_probability
        self.crashed = set()
        self.groups = None
        self.transcript = []
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

        self._rng = np.random.default_rng([self.config.seed, NET_STREAM])
        self._pending = []
        self._seq = 0

    @property
    def in_flight(self):
        return len(self._pending)

    def counters(self):
        return {"sent": self.sent, "delivered": self.delivered,
                "dropped": self.dropped, "in_flight": self.in_flight}

    def is_alive(self, node):
        return node not in self.crashed

    def _group_of(self, node):
        for i, group in enumerate(self.groups):
            if node in group:
                return i
        return -1

    def reachable(self, a, b):
        if self.groups is None:
            return True
        return self._group_of(a) == self._group_of(b)

    def _drop(self, frame, sender, to, seq, reason):
        self.dropped += 1
        self.transcript.append(NetEvent("drop", frame, sender, to, seq, reason))

    def send(self, sender, to, payload, frame):
        seq = self._seq
        self._seq += 1
        self.sent += 1
        self.transcript.append(NetEvent("send", frame, sender, to, seq))

        if sender in self.crashed:
            self._drop(frame, sender, to, seq, DROP_SENDER_DOWN)
            return
        if to in self.crashed:
            self._drop(frame, sender, to, seq, DROP_RECEIVER_DOWN)
            return
        if not self.reachable(sender, to):
            self._drop(frame, sender, to, seq, DROP_PARTITION)
            return
        if self.drop_probability > 0.0 and self._rng.random() < self.drop_probability:
            self._drop(frame, sender, to, seq, DROP_LOSS)
            return

        delay = self.config.base_delay
        if self.config.jitter:
            delay += int(self._rng.integers(0, self.config.jitter + 1))
        envelope = Envelope(sender, to, payload, frame, frame + delay, seq)
        heapq.heappush(self._pending, ((envelope.deliver_frame, frame, sender, to, seq), envelope))

    def step_frame(self, frame):
        """
        Deliverable envelopes due at this frame.

        Returns:
            list of (to, sender, payload) in delivery order
        """
        out = []
        while self._pending and self._pending[0][0][0] <= frame:
            _, env = heapq.heappop(self._pending)
            if env.to in self.crashed:
                self._drop(frame, env.sender, env.to, env.seq, DROP_RECEIVER_DOWN)
            elif not self.reachable(env.sender, env.to):
                self._drop(frame, env.sender, env.to, env.seq, DROP_PARTITION)
            else:
                self.delivered += 1
                self.transcript.append(NetEvent("deliver", frame, env.sender, env.to, env.seq))
                out.append((env.to, env.sender, env.payload))
        return out

    # ========== FAULTS ==========

    def crash(self, node, frame):
        self.crashed.add(node)
        kept = []
        for key, env in self._pending:
            if env.to == node:
                self._drop(frame, env.sender, env.to, env.seq, DROP_RECEIVER_DOWN)
            else:
                kept.append((key, env))
        heapq.heapify(kept)
        self._pending = kept
        logger.info("Node %s crashed at frame %s", node, frame)

    def recover(self, node, frame):
        self.crashed.discard(node)
        logger.info("Node %s recovered at frame %s", node, frame)

    def apply_faults(self, schedule, frame, terms=None):
        """
        Execute the schedule actions due at this frame.

        Args:
            schedule: FaultSchedule
            frame: Current frame
            terms: Optional node -> current term, stamped on the emitted events

        Returns:
            list of EventRecord ("simulate failure" / "simulate recovery")
        """
        terms = terms or {}
        events = []
        for action in schedule.actions_at(frame):
            if isinstance(action, CrashNode):
                self.crash(action.node, frame)
                events.append(EventRecord(EventType.SIMULATE_FAILURE, action.node, terms.get(action.node, 0), frame))
            elif isinstance(action, RecoverNode):
                self.recover(action.node, frame)
                events.append(EventRecord(EventType.SIMULATE_RECOVERY, action.node, terms.get(action.node, 0), frame))
            elif isinstance(action, Partition):
                self.groups = action.groups
                logger.info("Partition %s at frame %s", [sorted(g) for g in action.groups], frame)
            elif isinstance(action, Heal):
                self.groups = None
                logger.info("Partition healed at frame %s", frame)
            elif isinstance(action, DropProbability):
                self.drop_probability = action.p
                logger.info("Drop probability set to %s at frame %s", action.p, frame)
        return events
