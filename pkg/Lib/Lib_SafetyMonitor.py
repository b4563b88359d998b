import logging
from dataclasses import dataclass

from Core.Core_RaftReplica import Role

logger = logging.getLogger(__name__)

ELECTION_SAFETY = "election-safety"
LOG_MATCHING = "log-matching"
LEADER_APPEND_ONLY = "leader-append-only"
STATE_MACHINE_SAFETY = "state-machine-safety"
TERM_MONOTONICITY = "term-monotonicity"


@dataclass(frozen=True)
class Violation:
    kind: str
    frame: int
    detail: str

    def __str__(self):
        return f"[{self.kind}] frame {self.frame}: {self.detail}"


class SafetyMonitor:
    """
    Online checker of the Raft safety properties over a running cluster.

    Call observe_applied() with each node's drained entries and observe()
    once per frame with every live replica.
    """

    def __init__(self):
        self.violations = []
        self._leaders = {}        # term -> node
        self._entries = {}        # (index, term) -> (prev_term, command)
        self._applied = {}        # index -> (term, command)
        self._terms = {}          # node -> last seen term
        self._checked = {}        # node -> log entries already verified
        self._leading = {}        # node -> (term, log length, last entry)

    def _flag(self, kind, frame, detail):
        violation = Violation(kind, frame, detail)
        logger.error("Safety violation %s", violation)
        self.violations.append(violation)

    def observe_applied(self, node, entries, frame):
        for entry in entries:
            seen = self._applied.setdefault(entry.index, (entry.term, entry.command))
            if seen != (entry.term, entry.command):
                self._flag(STATE_MACHINE_SAFETY, frame,
                           f"node {node} applied term {entry.term} at index {entry.index}, "
                           f"another node applied term {seen[0]}")

    def observe(self, frame, replicas):
        """
        Args:
            frame: Current frame
            replicas: Iterable of live RaftReplica
        """
        for replica in replicas:
            self._check_term(frame, replica)
            self._check_leader(frame, replica)
            self._check_log(frame, replica)

    def forget(self, node):
        """Drop per-process bookkeeping for a crashed node (its log is re-verified on restore)."""
        self._checked.pop(node, None)
        self._leading.pop(node, None)

    def _check_term(self, frame, replica):
        last = self._terms.get(replica.id, 0)
        if replica.current_term < last:
            self._flag(TERM_MONOTONICITY, frame,
                       f"node {replica.id} went from term {last} to {replica.current_term}")
        self._terms[replica.id] = replica.current_term

    def _check_leader(self, frame, replica):
        if replica.role is not Role.LEADER:
            self._leading.pop(replica.id, None)
            return

        term = replica.current_term
        holder = self._leaders.setdefault(term, replica.id)
        if holder != replica.id:
            self._flag(ELECTION_SAFETY, frame, f"nodes {holder} and {replica.id} both lead term {term}")

        previous = self._leading.get(replica.id)
        if previous is not None and previous[0] == term:
            _, length, last = previous
            if len(replica.log) < length or (length and replica.log[length - 1] is not last):
                self._flag(LEADER_APPEND_ONLY, frame,
                           f"leader {replica.id} rewrote its log below index {length} in term {term}")
        last_entry = replica.log[-1] if replica.log else None
        self._leading[replica.id] = (term, len(replica.log), last_entry)

    def _check_log(self, frame, replica):
        log = replica.log
        checked = self._checked.setdefault(replica.id, [])
        k = min(len(checked), len(log))
        while k > 0 and log[k - 1] is not checked[k - 1]:
            k -= 1
        del checked[k:]

        for entry in log[k:]:
            prev_term = log[entry.index - 2].term if entry.index > 1 else 0
            seen = self._entries.setdefault((entry.index, entry.term), (prev_term, entry.command))
            if seen != (prev_term, entry.command):
                self._flag(LOG_MATCHING, frame,
                           f"node {replica.id} holds a different entry at (index {entry.index}, term {entry.term})")
            checked.append(entry)
