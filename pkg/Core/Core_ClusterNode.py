import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from Core.Core_Events import EventRecord, EventType
from Core.Core_Formation import (
    ControllerConfig,
    FormationGraph,
    FormationSpec,
    Vec2,
    assign_goals,
    formation_step,
)
from Core.Core_RaftReplica import (
    AddMember,
    ChangeInProgressError,
    MembershipError,
    Noop,
    NotLeaderError,
    PositionBatch,
    RemoveMember,
    Role,
)

logger = logging.getLogger(__name__)

# Seed stream tags
INIT_STREAM = 11
SPAWN_STREAM = 12

# Initial / spawn positions are drawn on [-BOX, BOX]^2
BOX = 2.0


class RegistryIncompleteError(RuntimeError):
    """Leader registry lags its log: a member without an agent, or an uncommitted earlier-term tail."""


class FailurePolicy(str, Enum):
    LEADER_ROLE_ONLY = "leader-role-only"
    FREEZE_AGENT = "freeze-agent"
    SHRINK_FORMATION = "shrink-formation"


@dataclass(frozen=True)
class ScriptedRotation:
    """
    Externally scripted leadership: the leader index advances every period
    frames; failed / excluded nodes are skipped by incrementing the index.

    Args:
        period: Rotation period in frames
        failure_frame: Frame at which the then-current leader fails for good
        excluded: (node, from_frame, until_frame | None) windows never led
    """

    period: int = 20
    failure_frame: Optional[int] = None
    excluded: tuple = ()

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"Rotation period must be positive, got {self.period}")
        object.__setattr__(self, "excluded", tuple(tuple(w) for w in self.excluded))


@dataclass(frozen=True)
class RaftElection:
    pass


LeadershipPolicy = Union[ScriptedRotation, RaftElection]


def initial_positions(seed, agent_ids):
    rng = np.random.default_rng([seed, INIT_STREAM])
    points = rng.uniform(-BOX, BOX, size=(len(agent_ids), 2))
    return {agent: Vec2(x, y) for agent, (x, y) in zip(agent_ids, points)}


def spawn_position(seed, agent):
    x, y = np.random.default_rng([seed, SPAWN_STREAM, agent]).uniform(-BOX, BOX, size=2)
    return Vec2(x, y)


# =========================================================
# SCRIPTED ROTATION
# =========================================================
def _excluded(node, frame, failed, windows):
    if node == failed:
        return True
    return any(node == n and start <= frame and (end is None or frame < end) for n, start, end in windows)


@lru_cache(maxsize=4096)
def scripted_rotation_leader(frame, n, policy):
    """Leader of the scripted rotation at the given frame."""
    if n <= 1:
        return 0
    leader = (frame // policy.period) % n
    failed = None
    if policy.failure_frame is not None and frame >= policy.failure_frame:
        failed = (policy.failure_frame // policy.period) % n

    for _ in range(n):
        if not _excluded(leader, frame, failed, policy.excluded):
            return leader
        leader = (leader + 1) % n
    logger.warning("Every node excluded from leadership at frame %s", frame)
    return leader


def _change_points(frame, policy):
    points = set(range(policy.period, frame + 1, policy.period))
    if policy.failure_frame is not None:
        points.add(policy.failure_frame)
    for _, start, end in policy.excluded:
        points.add(start)
        if end is not None:
            points.add(end)
    return sorted(p for p in points if 0 < p <= frame)


@lru_cache(maxsize=4096)
def scripted_rotation_term(frame, n, policy):
    """1 + number of scripted leadership changes in (0, frame]."""
    changes = sum(
        1 for p in _change_points(frame, policy)
        if scripted_rotation_leader(p, n, policy) != scripted_rotation_leader(p - 1, n, policy)
    )
    return 1 + changes


# =========================================================
# AGENT REGISTRY
# =========================================================
@dataclass(frozen=True)
class AgentState:
    position: Vec2
    alive: bool = True


class AgentRegistry:
    """
    Replicated state machine: agent id -> (position, alive), advanced one
    committed log entry at a time.
    """

    def __init__(self, agents=None, spawn_seed=0, applied_index=0):
        self.agents = dict(agents or {})
        self.spawn_seed = spawn_seed
        self.applied_index = applied_index

    @classmethod
    def from_positions(cls, positions, spawn_seed=0):
        return cls({agent: AgentState(pos) for agent, pos in positions.items()}, spawn_seed)

    def copy(self):
        return AgentRegistry(self.agents, self.spawn_seed, self.applied_index)

    def __eq__(self, other):
        return (isinstance(other, AgentRegistry)
                and self.applied_index == other.applied_index
                and self.agents == other.agents)

    def __repr__(self):
        return f"AgentRegistry(applied={self.applied_index}, live={self.live_ids()})"

    def live_ids(self):
        return sorted(a for a, state in self.agents.items() if state.alive)

    def all_ids(self):
        return sorted(self.agents)

    def snapshot(self):
        """agent id -> (x, y, alive)."""
        return {a: (s.position.x, s.position.y, s.alive) for a, s in sorted(self.agents.items())}

    def apply(self, entry):
        if entry.index != self.applied_index + 1:
            raise ValueError(f"Registry at index {self.applied_index} cannot apply entry {entry.index}")

        command = entry.command
        if isinstance(command, PositionBatch):
            for agent, position in command.moves:
                state = self.agents.get(agent)
                if state is not None:
                    self.agents[agent] = AgentState(position, state.alive)
        elif isinstance(command, AddMember):
            state = self.agents.get(command.node)
            position = state.position if state else spawn_position(self.spawn_seed, command.node)
            self.agents[command.node] = AgentState(position, True)
        elif isinstance(command, RemoveMember):
            state = self.agents.get(command.node)
            if state is not None:
                self.agents[command.node] = AgentState(state.position, False)
        self.applied_index = entry.index


@dataclass(frozen=True)
class ClusterSettings:
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    formation: FormationSpec = field(default_factory=lambda: FormationSpec(sides=1))
    leadership: LeadershipPolicy = field(default_factory=RaftElection)
    failure_policy: FailurePolicy = FailurePolicy.LEADER_ROLE_ONLY


@dataclass(frozen=True)
class NodeFrameResult:
    messages: list
    events: list
    applied: list


def goal_ids(registry, policy):
    """Agents owning a polygon vertex: every known agent when frozen agents keep theirs."""
    if policy is FailurePolicy.FREEZE_AGENT:
        return registry.all_ids()
    return registry.live_ids()


def leader_control_step(view, settings, members=None):
    """
    Next PositionBatch for every steered (live) agent of the view.

    Args:
        view: AgentRegistry the leader steers from
        settings: ClusterSettings
        members: Current configuration; each member must have an agent in view

    Raises:
        RegistryIncompleteError: a member has no agent in the view
    """
    missing = sorted(m for m in (members or ()) if m not in view.agents)
    if missing:
        raise RegistryIncompleteError(f"No registry entry for member(s) {missing}")

    steered = view.live_ids()
    if not steered:
        return PositionBatch(())
    goals = assign_goals(goal_ids(view, settings.failure_policy), settings.formation)
    positions = [view.agents[a].position for a in steered]
    targets = [goals[a] for a in steered]
    moved = formation_step(positions, targets, FormationGraph.complete(len(steered)), settings.controller)
    return PositionBatch(tuple(zip(steered, moved)))


def apply_committed(registry, entries):
    for entry in entries:
        registry.apply(entry)


class ClusterNode:
    """One cluster member: Raft replica, agent registry and, while leading, the controller."""

    def __init__(self, replica, registry, settings):
        self.replica = replica
        self.registry = registry
        self.settings = settings
        self.suspected = set()
        self.last_batch = None

    @property
    def id(self):
        return self.replica.id

    def __repr__(self):
        return f"ClusterNode({self.replica!r}, {self.registry!r})"

    def leader_view(self):
        """Committed registry folded with the not-yet-applied log tail (scripted rotation only)."""
        view = self.registry.copy()
        for entry in self.replica.log[view.applied_index:]:
            view.apply(entry)
        return view

    def steering_view(self):
        """
        Registry the leader steers from: the folded view under scripted
        rotation, the committed registry under Raft election.

        Raises:
            RegistryIncompleteError: entries of an earlier term are not committed yet
        """
        if isinstance(self.settings.leadership, ScriptedRotation):
            return self.leader_view()
        replica = self.replica
        if replica.commit_index < replica.last_log_index \
                and replica.log[replica.commit_index].term < replica.current_term:
            raise RegistryIncompleteError(
                f"Entries after index {replica.commit_index} predate term {replica.current_term}"
            )
        return self.registry

    def leader_control_step(self, frame):
        """
        PositionBatch the leader proposes at this frame.

        Raises:
            NotLeaderError: when this node does not lead
            RegistryIncompleteError: replication lag, the leader skips this frame
        """
        if self.replica.role is not Role.LEADER:
            raise NotLeaderError(self.replica.leader_hint)
        return leader_control_step(self.steering_view(), self.settings, self.replica.members)

    def apply_committed(self, entries):
        apply_committed(self.registry, entries)

    def _open_term(self):
        replica = self.replica
        if isinstance(self.settings.leadership, RaftElection) and replica.last_log_term < replica.current_term:
            index = replica.propose(Noop())
            logger.debug("Node %s opens term %s with a no-op at index %s", self.id, replica.current_term, index)

    def _follow_script(self, frame):
        policy = self.settings.leadership
        n = len(self.replica.bootstrap)
        leader = scripted_rotation_leader(frame, n, policy)
        term = scripted_rotation_term(frame, n, policy)
        replica = self.replica

        if term < replica.current_term:
            logger.warning("Node %s is ahead of the scripted term (%s > %s)", self.id, replica.current_term, term)
            return []
        if leader == self.id:
            if replica.role is Role.LEADER and replica.current_term == term:
                return []
            return replica.appoint_leader(term, frame)
        if replica.current_term < term or replica.leader_hint != leader or replica.role is not Role.FOLLOWER:
            replica.appoint_follower(term, leader, frame)
        return []

    def _detect_failures(self, frame):
        replica = self.replica
        timeout = replica.timers.failure_timeout
        silent = set()
        if replica.role is Role.LEADER:
            silent = {peer for peer, ack in replica.last_ack.items() if frame - ack > timeout}
        elif replica.role is Role.FOLLOWER and replica.leader_hint not in (None, self.id):
            if frame - replica.last_leader_contact > timeout:
                silent = {replica.leader_hint}

        events = []
        for node in sorted(silent - self.suspected):
            logger.info("Node %s reports node %s failed at frame %s", self.id, node, frame)
            events.append(EventRecord(EventType.FAILURE, node, replica.current_term, frame))
        self.suspected |= silent
        return events

    def _remove_failed(self):
        replica = self.replica
        for node in sorted(self.suspected & replica.members):
            if node == self.id:
                continue
            try:
                replica.change_membership(RemoveMember(node))
            except ChangeInProgressError:
                pass
            except (NotLeaderError, MembershipError) as e:
                logger.warning("Node %s cannot remove node %s: %s", self.id, node, e)
            return

    def _role_events(self, frame):
        events = []
        for role, term in self.replica.drain_role_changes():
            if role is Role.CANDIDATE:
                events.append(EventRecord(EventType.CANDIDATE, self.id, term, frame))
            elif role is Role.LEADER:
                events.append(EventRecord(EventType.LEADER, self.id, term, frame))
        return events

    def node_frame(self, inbound, frame):
        """
        One frame of node work: inbound messages, roles, timers, control, apply.

        Args:
            inbound: list of (sender, RaftMessage) delivered this frame
            frame: Current frame

        Returns:
            NodeFrameResult
        """
        replica = self.replica
        messages = []
        for sender, msg in inbound:
            self.suspected.discard(sender)
            messages.extend(replica.handle_message(sender, msg, frame))

        if isinstance(self.settings.leadership, ScriptedRotation):
            messages.extend(self._follow_script(frame))

        failure_events = self._detect_failures(frame)
        messages.extend(replica.tick(frame))

        applied = replica.drain_committed()
        self.apply_committed(applied)

        self.last_batch = None
        if replica.role is Role.LEADER:
            if self.settings.failure_policy is not FailurePolicy.LEADER_ROLE_ONLY:
                self._remove_failed()
            try:
                batch = self.leader_control_step(frame)
            except RegistryIncompleteError as e:
                logger.debug("Node %s skips control at frame %s: %s", self.id, frame, e)
                self._open_term()
            else:
                if batch.moves:
                    replica.propose(batch)
                    self.last_batch = batch

        committed = replica.drain_committed()
        self.apply_committed(committed)
        applied = applied + committed

        events = self._role_events(frame) + failure_events
        return NodeFrameResult(messages, events, applied)
