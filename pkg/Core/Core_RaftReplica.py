import logging
from dataclasses import dataclass
from functools import lru_cache
from enum import Enum
from typing import Optional, Union

import numpy as np

from Core.Core_Formation import Vec2

logger = logging.getLogger(__name__)

# Timer defaults (frames)
DEFAULT_HEARTBEAT_INTERVAL = 2
DEFAULT_ELECTION_TIMEOUT_MIN = 6
DEFAULT_ELECTION_TIMEOUT_MAX = 12
DEFAULT_FAILURE_TIMEOUT = 5

# Seed stream tag for election timeout draws
TIMER_STREAM = 101


class Role(str, Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class RaftError(RuntimeError):
    """Rejected replica operation."""


class NotLeaderError(RaftError):
    def __init__(self, leader_hint):
        super().__init__(f"Not the leader (leader hint: {leader_hint})")
        self.leader_hint = leader_hint


class ChangeInProgressError(RaftError):
    """An uncommitted membership entry already exists."""


class MembershipError(RaftError):
    """Membership change that makes no sense for the current configuration."""


# ========== COMMANDS ==========

@dataclass(frozen=True)
class PositionBatch:
    """New positions for a set of agents, each agent listed at most once."""

    moves: tuple = ()

    def __post_init__(self):
        moves = tuple((int(agent), position) for agent, position in self.moves)
        agents = [agent for agent, _ in moves]
        if len(agents) != len(set(agents)):
            raise ValueError(f"PositionBatch lists an agent twice: {agents}")
        for _, position in moves:
            if not isinstance(position, Vec2):
                raise TypeError(f"PositionBatch positions must be Vec2, got {type(position).__name__}")
        object.__setattr__(self, "moves", moves)

    def as_dict(self):
        return dict(self.moves)


@dataclass(frozen=True)
class AddMember:
    node: int


@dataclass(frozen=True)
class RemoveMember:
    node: int


@dataclass(frozen=True)
class Noop:
    pass


Command = Union[PositionBatch, AddMember, RemoveMember, Noop]
MEMBERSHIP_COMMANDS = (AddMember, RemoveMember)


@dataclass(frozen=True)
class LogEntry:
    term: int
    index: int
    command: Command


# ========== MESSAGES ==========

@dataclass(frozen=True)
class RequestVote:
    term: int
    candidate: int
    last_log_index: int
    last_log_term: int


@dataclass(frozen=True)
class VoteReply:
    term: int
    granted: bool


@dataclass(frozen=True)
class AppendEntries:
    term: int
    leader: int
    prev_index: int
    prev_term: int
    entries: tuple
    leader_commit: int


@dataclass(frozen=True)
class AppendReply:
    """On failure, match_index is a back-off hint (highest index worth retrying from)."""

    term: int
    success: bool
    match_index: int


RaftMessage = Union[RequestVote, VoteReply, AppendEntries, AppendReply]


@lru_cache(maxsize=4096)
def _timeout_shift(seed, frame, span):
    return int(np.random.default_rng([seed, TIMER_STREAM, frame]).integers(span))


@dataclass(frozen=True)
class TimerConfig:
    """
    Protocol timers in frames.

    Every election timeout is uniform over [election_timeout_min,
    election_timeout_max]. Draws made in the same frame share one seeded shift
    and are offset by the node's rank in its configuration, so replicas that
    reset together never pick the same value while the cluster fits the range.
    first_timeouts pins the very first draw of listed nodes as ((node, frames), ...).
    """

    heartbeat_interval: int = DEFAULT_HEARTBEAT_INTERVAL
    election_timeout_min: int = DEFAULT_ELECTION_TIMEOUT_MIN
    election_timeout_max: int = DEFAULT_ELECTION_TIMEOUT_MAX
    failure_timeout: int = DEFAULT_FAILURE_TIMEOUT
    seed: int = 0
    first_timeouts: tuple = ()

    def __post_init__(self):
        if self.heartbeat_interval < 1:
            raise ValueError(f"heartbeat_interval must be positive, got {self.heartbeat_interval}")
        if not 0 < self.election_timeout_min < self.election_timeout_max:
            raise ValueError(
                f"Need 0 < election_timeout_min < election_timeout_max, "
                f"got {self.election_timeout_min}, {self.election_timeout_max}"
            )
        if self.heartbeat_interval >= self.election_timeout_min:
            raise ValueError("heartbeat_interval must be below election_timeout_min")
        if self.failure_timeout < 1:
            raise ValueError(f"failure_timeout must be positive, got {self.failure_timeout}")
        if self.seed < 0:
            raise ValueError(f"Seed must be non-negative, got {self.seed}")
        for node, frames in self.first_timeouts:
            if frames < 1:
                raise ValueError(f"Pinned first timeout for node {node} must be positive")

    def draw_timeout(self, rank, frame):
        span = self.election_timeout_max - self.election_timeout_min + 1
        return self.election_timeout_min + (_timeout_shift(self.seed, frame, span) + rank) % span


class RaftReplica:
    """
    One node's Raft state machine. Time enters only through the frame argument;
    every operation returns the (destination, message) pairs to send.

    Args:
        node_id: This node's id
        members: Bootstrap configuration (voting node ids)
        timers: TimerConfig
        frame: Frame the replica starts at
        auto_elect: False disables election timers (scripted leadership)
    """

    def __init__(self, node_id, members, timers, *, frame=0, auto_elect=True):
        self.id = node_id
        self.timers = timers
        self.auto_elect = auto_elect
        self.bootstrap = frozenset(members)
        self.members = self.bootstrap

        # Persistent state
        self.current_term = 0
        self.voted_for: Optional[int] = None
        self.log: list = []

        # Volatile state
        self.role = Role.FOLLOWER
        self.commit_index = 0
        self.last_applied = 0
        self.leader_hint: Optional[int] = None
        self.votes: set = set()
        self.frame = frame
        self.last_leader_contact = frame

        # Leader state
        self.next_index: dict = {}
        self.match_index: dict = {}
        self.last_ack: dict = {}
        self.heartbeat_deadline = frame

        self._role_changes = []
        self._pinned_timeout = dict(timers.first_timeouts).get(node_id)
        self.election_deadline = frame + self._draw_timeout(frame)

    def __repr__(self):
        return (f"RaftReplica(id={self.id}, role={self.role.value}, term={self.current_term}, "
                f"log={len(self.log)}, commit={self.commit_index})")

    # ========== LOG / CONFIGURATION HELPERS ==========

    @property
    def peers(self):
        return tuple(sorted(self.members - {self.id}))

    @property
    def last_log_index(self):
        return len(self.log)

    @property
    def last_log_term(self):
        return self.log[-1].term if self.log else 0

    def term_at(self, index):
        """Term of the entry at index (0 for index 0, None past the end)."""
        if index == 0:
            return 0
        if 0 < index <= len(self.log):
            return self.log[index - 1].term
        return None

    def is_member(self):
        return self.id in self.members

    def quorum_size(self):
        return len(self.members) // 2 + 1

    def pending_membership_change(self):
        return any(isinstance(entry.command, MEMBERSHIP_COMMANDS) for entry in self.log[self.commit_index:])

    def _refresh_members(self):
        members = set(self.bootstrap)
        for entry in self.log:
            if isinstance(entry.command, AddMember):
                members.add(entry.command.node)
            elif isinstance(entry.command, RemoveMember):
                members.discard(entry.command.node)
        self.members = frozenset(members)

        if self.role is Role.LEADER:
            for peer in self.peers:
                if peer not in self.next_index:
                    self.next_index[peer] = self.last_log_index + 1
                    self.match_index[peer] = 0
                    self.last_ack[peer] = self.frame
            for peer in list(self.next_index):
                if peer not in self.members:
                    del self.next_index[peer]
                    del self.match_index[peer]
                    self.last_ack.pop(peer, None)
        logger.debug("Node %s configuration: %s", self.id, sorted(self.members))

    # ========== TIMERS / ROLES ==========

    def _draw_timeout(self, frame):
        if self._pinned_timeout is not None:
            timeout, self._pinned_timeout = self._pinned_timeout, None
            return timeout
        rank = sorted(self.members | {self.id}).index(self.id)
        return self.timers.draw_timeout(rank, frame)

    def _reset_election_timer(self, frame):
        self.election_deadline = frame + self._draw_timeout(frame)

    def _set_role(self, role):
        if role is not self.role:
            self.role = role
            self._role_changes.append((role, self.current_term))

    def drain_role_changes(self):
        """(role, term) transitions since the previous call, oldest first."""
        changes, self._role_changes = self._role_changes, []
        return changes

    def _step_down(self, term):
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
        if self.role is not Role.FOLLOWER:
            logger.debug("Node %s steps down in term %s", self.id, self.current_term)
            self._set_role(Role.FOLLOWER)
            self.votes.clear()
            self.next_index.clear()
            self.match_index.clear()
            self.last_ack.clear()

    def _has_quorum(self, voters):
        return len(voters & self.members) >= self.quorum_size()

    def _start_election(self, frame):
        self.current_term += 1
        self.voted_for = self.id
        self.votes = {self.id}
        self.leader_hint = None
        self._set_role(Role.CANDIDATE)
        self._reset_election_timer(frame)
        logger.debug("Node %s starts election for term %s at frame %s", self.id, self.current_term, frame)

        if self._has_quorum(self.votes):
            return self._become_leader(frame)
        request = RequestVote(self.current_term, self.id, self.last_log_index, self.last_log_term)
        return [(peer, request) for peer in self.peers]

    def _become_leader(self, frame):
        self.leader_hint = self.id
        self.votes.clear()
        self.next_index = {peer: self.last_log_index + 1 for peer in self.peers}
        self.match_index = {peer: 0 for peer in self.peers}
        self.last_ack = {peer: frame for peer in self.peers}
        self._set_role(Role.LEADER)
        logger.info("Node %s is leader for term %s at frame %s", self.id, self.current_term, frame)

        self.heartbeat_deadline = frame + self.timers.heartbeat_interval
        self._advance_commit()
        return self._broadcast_append()

    def appoint_leader(self, term, frame):
        """Scripted leadership: take the leader role in a term nobody else led."""
        self.frame = frame
        if term < self.current_term or (term == self.current_term and self.role is not Role.LEADER):
            raise RaftError(f"Node {self.id} cannot lead term {term} (current term {self.current_term})")
        if term == self.current_term:
            return []
        self.current_term = term
        self.voted_for = self.id
        return self._become_leader(frame)

    def appoint_follower(self, term, leader, frame):
        """Scripted leadership: follow the given leader in the given term."""
        self.frame = frame
        if term < self.current_term:
            raise RaftError(f"Node {self.id} cannot follow stale term {term} (current term {self.current_term})")
        self._step_down(term)
        if self.leader_hint != leader:
            self.leader_hint = leader
            self.last_leader_contact = frame
        self._reset_election_timer(frame)

    # ========== OPERATIONS ==========

    def tick(self, frame):
        """
        Advance timers to the given frame.

        Returns:
            list of (destination, RaftMessage)
        """
        self.frame = frame
        if self.role is Role.LEADER:
            self._advance_commit()
            if frame >= self.heartbeat_deadline:
                self.heartbeat_deadline = frame + self.timers.heartbeat_interval
                return self._broadcast_append()
            return []

        if frame < self.election_deadline:
            return []
        if not self.auto_elect or not self.is_member():
            self._reset_election_timer(frame)
            return []
        return self._start_election(frame)

    def handle_message(self, sender, msg, frame):
        """
        Apply the Raft receiver rules to one message.

        Returns:
            list of (destination, RaftMessage)
        """
        self.frame = frame
        if msg.term > self.current_term:
            self._step_down(msg.term)

        if isinstance(msg, RequestVote):
            return self._on_request_vote(msg, frame)
        if isinstance(msg, VoteReply):
            return self._on_vote_reply(sender, msg, frame)
        if isinstance(msg, AppendEntries):
            return self._on_append_entries(sender, msg, frame)
        if isinstance(msg, AppendReply):
            return self._on_append_reply(sender, msg, frame)

        logger.warning("Node %s ignores unknown message %r from %s", self.id, msg, sender)
        return []

    def _candidate_up_to_date(self, msg):
        return (msg.last_log_term, msg.last_log_index) >= (self.last_log_term, self.last_log_index)

    def _on_request_vote(self, msg, frame):
        granted = (
            msg.term == self.current_term
            and self.voted_for in (None, msg.candidate)
            and self._candidate_up_to_date(msg)
        )
        if granted:
            self.voted_for = msg.candidate
            self._reset_election_timer(frame)
        return [(msg.candidate, VoteReply(self.current_term, granted))]

    def _on_vote_reply(self, sender, msg, frame):
        if self.role is not Role.CANDIDATE or msg.term != self.current_term or not msg.granted:
            return []
        self.votes.add(sender)
        if self._has_quorum(self.votes):
            return self._become_leader(frame)
        return []

    def _reject(self, sender, hint):
        return [(sender, AppendReply(self.current_term, False, max(0, hint)))]

    def _on_append_entries(self, sender, msg, frame):
        if msg.term < self.current_term:
            return self._reject(sender, 0)

        if self.role is Role.LEADER:
            logger.error("Node %s received AppendEntries from %s in its own term %s", self.id, sender, msg.term)
        if self.role is not Role.FOLLOWER:
            self._set_role(Role.FOLLOWER)
            self.votes.clear()
        self.leader_hint = msg.leader
        self.last_leader_contact = frame
        self._reset_election_timer(frame)

        if msg.prev_index < 0 or msg.prev_index > self.last_log_index:
            return self._reject(sender, self.last_log_index)
        if self.term_at(msg.prev_index) != msg.prev_term:
            return self._reject(sender, min(self.commit_index, msg.prev_index - 1))

        index = msg.prev_index
        membership_touched = False
        for entry in msg.entries:
            index += 1
            if entry.index != index:
                logger.warning("Node %s got non-contiguous entries from %s", self.id, sender)
                return self._reject(sender, self.last_log_index)
            if index <= self.last_log_index:
                if self.log[index - 1].term == entry.term:
                    continue
                if index <= self.commit_index:
                    logger.error("Node %s refuses to truncate committed index %s", self.id, index)
                    return self._reject(sender, self.commit_index)
                membership_touched |= any(
                    isinstance(old.command, MEMBERSHIP_COMMANDS) for old in self.log[index - 1:]
                )
                del self.log[index - 1:]
            self.log.append(entry)
            membership_touched |= isinstance(entry.command, MEMBERSHIP_COMMANDS)

        if membership_touched:
            self._refresh_members()

        match = msg.prev_index + len(msg.entries)
        if msg.leader_commit > self.commit_index:
            self.commit_index = max(self.commit_index, min(msg.leader_commit, match))
        return [(sender, AppendReply(self.current_term, True, match))]

    def _on_append_reply(self, sender, msg, frame):
        if self.role is not Role.LEADER or msg.term != self.current_term or sender not in self.next_index:
            return []
        self.last_ack[sender] = frame

        if msg.success:
            if msg.match_index > self.match_index[sender]:
                self.match_index[sender] = min(msg.match_index, self.last_log_index)
            self.next_index[sender] = max(self.next_index[sender], self.match_index[sender] + 1)
            self._advance_commit()
            return []

        hint = max(0, min(msg.match_index, self.last_log_index))
        self.next_index[sender] = max(1, min(self.next_index[sender] - 1, hint + 1))
        return [(sender, self._append_for(sender))]

    def _append_for(self, peer):
        prev = self.next_index[peer] - 1
        return AppendEntries(
            self.current_term, self.id, prev, self.term_at(prev), tuple(self.log[prev:]), self.commit_index
        )

    def _broadcast_append(self):
        return [(peer, self._append_for(peer)) for peer in self.peers]

    def _advance_commit(self):
        if self.role is not Role.LEADER:
            return
        quorum = self.quorum_size()
        for index in range(self.last_log_index, self.commit_index, -1):
            if self.log[index - 1].term != self.current_term:
                break
            replicated = sum(
                1 for member in self.members
                if member == self.id or self.match_index.get(member, 0) >= index
            )
            if replicated >= quorum:
                self.commit_index = index
                break

    def propose(self, command):
        """
        Append a command to the leader's log.

        Returns:
            Log index of the new entry

        Raises:
            NotLeaderError: when this replica is not the leader
        """
        if self.role is not Role.LEADER:
            raise NotLeaderError(self.leader_hint)
        entry = LogEntry(self.current_term, self.last_log_index + 1, command)
        self.log.append(entry)
        if isinstance(command, MEMBERSHIP_COMMANDS):
            self._refresh_members()
        self._advance_commit()
        return entry.index

    def change_membership(self, change):
        """
        Single-server configuration change, effective once appended.

        Raises:
            NotLeaderError, ChangeInProgressError, MembershipError
        """
        if not isinstance(change, MEMBERSHIP_COMMANDS):
            raise MembershipError(f"Not a membership command: {change!r}")
        if self.role is not Role.LEADER:
            raise NotLeaderError(self.leader_hint)
        if self.pending_membership_change():
            raise ChangeInProgressError("Previous membership change not committed yet")
        if self.term_at(self.commit_index) != self.current_term:
            raise ChangeInProgressError(f"No entry committed in term {self.current_term} yet")
        if isinstance(change, AddMember) and change.node in self.members:
            raise MembershipError(f"Node {change.node} is already a member")
        if isinstance(change, RemoveMember):
            if change.node not in self.members:
                raise MembershipError(f"Node {change.node} is not a member")
            if change.node == self.id:
                raise MembershipError("Leader cannot remove itself")

        index = self.propose(change)
        logger.info("Node %s appended %r at index %s (quorum %s of %s)",
                    self.id, change, index, self.quorum_size(), len(self.members))
        return index

    def drain_committed(self):
        """Entries in (last_applied, commit_index], each returned exactly once."""
        entries = self.log[self.last_applied:self.commit_index]
        self.last_applied = self.commit_index
        return entries
