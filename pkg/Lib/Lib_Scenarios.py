import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PySide6.QtCore import QObject, Signal

from Core.Core_ClusterNode import (
    AgentRegistry,
    ClusterNode,
    ClusterSettings,
    FailurePolicy,
    RaftElection,
    ScriptedRotation,
    goal_ids,
    initial_positions,
)
from Core.Core_Events import EventType
from Core.Core_Formation import (
    ControllerConfig,
    FormationGraph,
    FormationSpec,
    assign_goals,
    formation_errors,
    global_error,
)
from Core.Core_RaftReplica import (
    AddMember,
    ChangeInProgressError,
    MembershipError,
    NotLeaderError,
    RaftReplica,
    RemoveMember,
    Role,
    TimerConfig,
)
from Core.Core_RaftStorage import PersistentRecord, persist, restore
from Core.Core_SimNet import (
    CrashNode,
    DropProbability,
    FaultSchedule,
    FaultScheduleError,
    Heal,
    NetConfig,
    Partition,
    RecoverNode,
    SimNet,
)
from Lib.Lib_SafetyMonitor import ELECTION_SAFETY, SafetyMonitor, Violation

logger = logging.getLogger(__name__)

SCENARIO_LABELS = ("A", "B", "C", "D", "E", "F", "G")
STRESS_LABEL = "stress"

CONVERGENCE_THRESHOLD = 1e-3
VIEW_EVERY = 5
STRESS_STREAM = 303

# label -> (agents, frames)
SCENARIO_DEFAULTS = {
    "A": (5, 60),
    "B": (5, 200),
    "C": (5, 1500),
    "D": (5, 300),
    "E": (3, 200),
    "F": (3, 100),
    "G": (4, 2000),
}

ROTATION_PERIOD = 20
ROTATION_FAILURE_FRAME = 35
SHRINK_FAILURE_FRAME = 30
SHRINK_FAILED = 2
F_CRASH_FRAME = 10
F_RECOVER_FRAME = 20
G_ADD_FRAME = 50

OVERRIDE_ALIASES = {"n": "agents", "m": "failed", "k": "gain"}
OVERRIDE_KEYS = {
    "agents", "frames", "seed", "failed", "gain", "dt", "radius", "anchor_gain",
    "heartbeat_interval", "election_timeout_min", "election_timeout_max",
    "failure_timeout", "failure_frame", "period", "faults", "membership",
    "add_frame", "view_every",
}


class ScenarioError(ValueError):
    """Unknown scenario or inconsistent scenario overrides."""


@dataclass(frozen=True)
class ScenarioSpec:
    label: str
    agents: int
    frames: int
    leadership: object = field(default_factory=RaftElection)
    failure_policy: FailurePolicy = FailurePolicy.LEADER_ROLE_ONLY
    faults: FaultSchedule = field(default_factory=FaultSchedule)
    membership: tuple = ()
    formation: FormationSpec = field(default_factory=lambda: FormationSpec(sides=1))
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    timers: TimerConfig = field(default_factory=TimerConfig)
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    view_every: int = VIEW_EVERY

    def __post_init__(self):
        if self.agents < 1:
            raise ScenarioError(f"Need at least one agent, got {self.agents}")
        if self.frames < 1:
            raise ScenarioError(f"Need at least one frame, got {self.frames}")
        if self.seed < 0:
            raise ScenarioError(f"Seed must be non-negative, got {self.seed}")
        if self.view_every < 1:
            raise ScenarioError(f"view_every must be positive, got {self.view_every}")

        known = set(range(self.agents))
        for command, frame in self.membership:
            if not isinstance(command, (AddMember, RemoveMember)) or frame < 0:
                raise ScenarioError(f"Bad membership action ({command!r}, {frame})")
            if isinstance(command, AddMember):
                known.add(command.node)
        for action in self.faults:
            node = getattr(action, "node", None)
            if node is not None and node not in known:
                raise ScenarioError(f"Fault {action!r} names unknown node {node}")
            for group in getattr(action, "groups", ()):
                if not group <= known:
                    raise ScenarioError(f"Partition names unknown node(s) {sorted(group - known)}")

    def all_agents(self):
        """Initial agents plus every agent added at runtime."""
        added = {c.node for c, _ in self.membership if isinstance(c, AddMember)}
        return sorted(set(range(self.agents)) | added)


def _canonical(overrides):
    options = {}
    for key, value in overrides.items():
        name = OVERRIDE_ALIASES.get(key, key)
        if name not in OVERRIDE_KEYS:
            raise ScenarioError(f"Unknown scenario override {key!r}")
        if value is not None:
            options[name] = value
    return options


def _schedule(actions):
    try:
        return FaultSchedule(actions)
    except FaultScheduleError as e:
        raise ScenarioError(str(e)) from e


def _rotation(period, failure_frame, crash_windows):
    try:
        return ScriptedRotation(period, failure_frame, crash_windows)
    except ValueError as e:
        raise ScenarioError(str(e)) from e


def build_scenario(label, **overrides):
    """
    Canonical spec of a named scenario, with optional overrides
    (agents/n, frames, seed, failed/m, gain/k, dt, radius, anchor_gain, timer
    bounds, failure_frame, period, faults, membership, add_frame, view_every).

    Raises:
        ScenarioError: unknown label, unknown override or inconsistent values
    """
    label = str(label).upper()
    if label not in SCENARIO_LABELS:
        raise ScenarioError(f"Unknown scenario {label!r}, expected one of {', '.join(SCENARIO_LABELS)}")
    opts = _canonical(overrides)

    agents, frames = SCENARIO_DEFAULTS[label]
    agents = int(opts.get("agents", agents))
    frames = int(opts.get("frames", frames))
    seed = int(opts.get("seed", 0))
    period = int(opts.get("period", ROTATION_PERIOD))
    user_faults = opts.get("faults")
    membership = tuple(opts.get("membership", ()))
    if agents < 1:
        raise ScenarioError(f"Scenario {label} needs at least one agent, got {agents}")
    if period < 1:
        raise ScenarioError(f"Rotation period must be positive, got {period}")

    try:
        controller = ControllerConfig(
            gain=float(opts.get("gain", ControllerConfig.gain)),
            dt=float(opts.get("dt", ControllerConfig.dt)),
            anchor_gain=float(opts.get("anchor_gain", ControllerConfig.anchor_gain)),
        )
        formation = FormationSpec(sides=max(agents, 1), radius=float(opts.get("radius", FormationSpec.radius)))
        timer_args = dict(
            heartbeat_interval=int(opts.get("heartbeat_interval", TimerConfig.heartbeat_interval)),
            election_timeout_min=int(opts.get("election_timeout_min", TimerConfig.election_timeout_min)),
            election_timeout_max=int(opts.get("election_timeout_max", TimerConfig.election_timeout_max)),
            failure_timeout=int(opts.get("failure_timeout", TimerConfig.failure_timeout)),
            seed=seed,
        )
        timers = TimerConfig(**timer_args)
        net = NetConfig(seed=seed)
    except ValueError as e:
        raise ScenarioError(str(e)) from e

    failure_policy = FailurePolicy.LEADER_ROLE_ONLY
    leadership = RaftElection()

    if label == "A":
        faults = _schedule(user_faults or ())
        leadership = _rotation(period, int(opts.get("failure_frame", ROTATION_FAILURE_FRAME)),
                               faults.crash_windows())

    elif label == "B":
        failure_frame = int(opts.get("failure_frame", ROTATION_FAILURE_FRAME))
        failed = (failure_frame // period) % agents
        faults = _schedule(user_faults if user_faults is not None else [CrashNode(failed, failure_frame)])
        leadership = _rotation(period, None, faults.crash_windows())
        failure_policy = FailurePolicy.FREEZE_AGENT

    elif label == "C":
        if user_faults is not None:
            faults = _schedule(user_faults)
        else:
            failed = int(opts.get("failed", SHRINK_FAILED))
            failure_frame = int(opts.get("failure_frame", SHRINK_FAILURE_FRAME))
            if not 0 < failed < agents:
                raise ScenarioError(f"Scenario C needs 0 < m < n, got m={failed}, n={agents}")
            faults = _schedule([CrashNode(node, failure_frame) for node in range(1, failed + 1)])
        crashed = {node for node, _, end in faults.crash_windows() if end is None}
        if 2 * (agents - len(crashed)) <= agents:
            raise ScenarioError(f"Scenario C with {len(crashed)} of {agents} nodes failed has no live majority")
        leadership = _rotation(period, None, faults.crash_windows())
        failure_policy = FailurePolicy.SHRINK_FORMATION

    elif label == "F":
        faults = _schedule(user_faults if user_faults is not None else
                           [CrashNode(1, F_CRASH_FRAME), RecoverNode(1, F_RECOVER_FRAME)])
        if agents > 1:
            # node 1 times out first so it leads the first term
            pinned = max(1, timers.election_timeout_min - 1)
            timers = TimerConfig(**timer_args, first_timeouts=((1, pinned),))

    elif label == "G":
        faults = _schedule(user_faults or ())
        if not membership:
            membership = ((AddMember(agents), int(opts.get("add_frame", G_ADD_FRAME))),)

    else:
        faults = _schedule(user_faults or ())

    spec = ScenarioSpec(
        label=label,
        agents=agents,
        frames=frames,
        leadership=leadership,
        failure_policy=failure_policy,
        faults=faults,
        membership=membership,
        formation=formation,
        controller=controller,
        timers=timers,
        net=net,
        seed=seed,
        view_every=int(opts.get("view_every", VIEW_EVERY)),
    )
    logger.debug("Built scenario %s: %s", label, spec)
    return spec


def build_stress_scenario(seed, agents=5, frames=150):
    """
    Raft election under a seeded random fault schedule: crash/recover windows,
    partitions with heals, drop-probability changes and one frame of jitter.
    """
    rng = np.random.default_rng([seed, STRESS_STREAM])
    actions = []

    crashes = int(rng.integers(1, 3))
    for node in rng.choice(agents, size=min(crashes, agents), replace=False):
        start = int(rng.integers(5, frames // 2))
        actions.append(CrashNode(int(node), start))
        actions.append(RecoverNode(int(node), start + int(rng.integers(5, 40))))

    for _ in range(int(rng.integers(0, 3))):
        start = int(rng.integers(5, frames - 10))
        order = rng.permutation(agents)
        cut = int(rng.integers(1, agents)) if agents > 1 else 1
        groups = tuple(g for g in (order[:cut].tolist(), order[cut:].tolist()) if g)
        actions.append(Partition(groups, start))
        actions.append(Heal(start + int(rng.integers(5, 30))))

    drop_at = int(rng.integers(0, frames // 2))
    actions.append(DropProbability(float(rng.uniform(0.0, 0.2)), drop_at))
    actions.append(DropProbability(0.05, drop_at + int(rng.integers(10, 40))))

    return ScenarioSpec(
        label=STRESS_LABEL,
        agents=agents,
        frames=frames,
        faults=FaultSchedule(actions),
        formation=FormationSpec(sides=agents),
        timers=TimerConfig(seed=seed),
        net=NetConfig(seed=seed, jitter=1, drop_probability=0.05),
        seed=seed,
    )


# =========================================================
# RUN RECORD
# =========================================================
@dataclass
class RunRecord:
    """
    Everything a run produced. Per-frame lists are indexed by frame number;
    trajectories / per_agent_error hold agent id -> value dicts.
    """

    label: str = ""
    seed: int = 0
    trajectories: list = field(default_factory=list)
    per_agent_error: list = field(default_factory=list)
    global_error: list = field(default_factory=list)
    leaders: list = field(default_factory=list)
    member_counts: list = field(default_factory=list)
    quorums: list = field(default_factory=list)
    live_agents: list = field(default_factory=list)
    events: list = field(default_factory=list)
    per_node_views: dict = field(default_factory=dict)
    final_positions: dict = field(default_factory=dict)
    final_roles: dict = field(default_factory=dict)
    final_terms: dict = field(default_factory=dict)
    final_logs: dict = field(default_factory=dict)
    final_commits: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    net_counters: dict = field(default_factory=dict)

    @property
    def frame_count(self):
        return len(self.global_error)


@dataclass(frozen=True)
class RunSummary:
    label: str
    seed: int
    final_error: float
    convergence_frame: Optional[int]
    leaders_per_term: dict
    violations: tuple
    detection_latencies: tuple

    @property
    def safe(self):
        return not self.violations


def summarize(record):
    """Final E, convergence frame, leaders per term, violations and failure detection latencies."""
    convergence = None
    for frame, errors in enumerate(record.per_agent_error):
        live = record.live_agents[frame] if frame < len(record.live_agents) else tuple(errors)
        if all(errors[a] < CONVERGENCE_THRESHOLD for a in live if a in errors):
            convergence = frame
            break

    leaders = Counter(e.term for e in record.events if e.type is EventType.LEADER)
    violations = list(record.violations)
    for term, count in sorted(leaders.items()):
        if count > 1:
            violations.append(Violation(ELECTION_SAFETY, -1, f"{count} leader events in term {term}"))

    latencies = []
    for crash in (e for e in record.events if e.type is EventType.SIMULATE_FAILURE):
        detected = next((e.frame for e in record.events
                         if e.type is EventType.FAILURE and e.node == crash.node and e.frame >= crash.frame), None)
        latencies.append((crash.node, crash.frame, None if detected is None else detected - crash.frame))

    return RunSummary(
        label=record.label,
        seed=record.seed,
        final_error=record.global_error[-1] if record.global_error else 0.0,
        convergence_frame=convergence,
        leaders_per_term=dict(sorted(leaders.items())),
        violations=tuple(violations),
        detection_latencies=tuple(latencies),
    )


# =========================================================
# RUNNER
# =========================================================
class ScenarioRunner(QObject):
    """
    Frame loop over a simulated cluster.

    Each frame: apply faults, submit due membership changes, deliver messages,
    run every live node in id order, then record positions and metrics.
    """

    status_message = Signal(str, int)  # (message, timeout_ms)
    frame_finished = Signal(int)

    def __init__(self, parent=None):
        super().__init__(parent)

    # ========== SETUP ==========

    def _setup(self, spec):
        n_max = len(spec.all_agents())
        spec.controller.check_stability(max(n_max - 1, 0))

        self.spec = spec
        self.settings = ClusterSettings(spec.controller, spec.formation, spec.leadership, spec.failure_policy)
        self.bootstrap = tuple(range(spec.agents))
        self.auto_elect = isinstance(spec.leadership, RaftElection)
        self.initial = initial_positions(spec.seed, self.bootstrap)

        self.net = SimNet(spec.net)
        self.monitor = SafetyMonitor()
        self.nodes = {i: self._fresh_node(i, 0) for i in self.bootstrap}
        self.down = {}       # node -> (record text, applied index, term)
        self.holding = {}    # recovered node -> applied index before its crash
        self.physical = dict(self.initial)
        self.pending = sorted(spec.membership, key=lambda item: item[1])
        self.goals = {}
        self.record = RunRecord(label=spec.label, seed=spec.seed)

    def _fresh_registry(self):
        return AgentRegistry.from_positions(self.initial, spawn_seed=self.spec.seed)

    def _fresh_node(self, node_id, frame):
        replica = RaftReplica(node_id, self.bootstrap, self.spec.timers, frame=frame, auto_elect=self.auto_elect)
        return ClusterNode(replica, self._fresh_registry(), self.settings)

    def _leader(self):
        leaders = [n for n in self.nodes.values() if n.replica.role is Role.LEADER]
        if not leaders:
            return None
        return min(leaders, key=lambda n: (-n.replica.current_term, n.id))

    # ========== FRAME STEPS ==========

    def _apply_faults(self, frame):
        terms = {i: n.replica.current_term for i, n in self.nodes.items()}
        terms.update({i: term for i, (_, _, term) in self.down.items()})
        events = self.net.apply_faults(self.spec.faults, frame, terms)

        for event in events:
            node_id = event.node
            if event.type is EventType.SIMULATE_FAILURE and node_id in self.nodes:
                node = self.nodes.pop(node_id)
                text = persist(node.replica).encode()
                self.down[node_id] = (text, node.registry.applied_index, node.replica.current_term)
                self.holding.pop(node_id, None)
                self.monitor.forget(node_id)
            elif event.type is EventType.SIMULATE_RECOVERY and node_id in self.down:
                text, applied, _ = self.down.pop(node_id)
                replica = restore(PersistentRecord.decode(text), node_id, self.bootstrap, self.spec.timers,
                                  frame=frame, auto_elect=self.auto_elect)
                self.nodes[node_id] = ClusterNode(replica, self._fresh_registry(), self.settings)
                self.holding[node_id] = applied
            self.status_message.emit(f"Frame {frame}: {event.type.value} node {node_id}", 0)
        return events

    def _submit_membership(self, frame):
        still_pending = []
        for command, due in self.pending:
            if due > frame:
                still_pending.append((command, due))
                continue
            if isinstance(command, AddMember) and command.node not in self.nodes and command.node not in self.down:
                self.nodes[command.node] = self._fresh_node(command.node, frame)

            leader = self._leader()
            if leader is None or (isinstance(command, RemoveMember) and command.node == leader.id):
                still_pending.append((command, due))
                continue
            try:
                index = leader.replica.change_membership(command)
            except (NotLeaderError, ChangeInProgressError):
                still_pending.append((command, due))
            except MembershipError as e:
                logger.warning("Dropping membership action %r: %s", command, e)
            else:
                self.status_message.emit(f"Frame {frame}: {command!r} appended at index {index}", 0)
        self.pending = still_pending

    def _step_nodes(self, frame):
        inbound = {}
        for to, sender, payload in self.net.step_frame(frame):
            inbound.setdefault(to, []).append((sender, payload))

        events = []
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            result = node.node_frame(inbound.get(node_id, []), frame)
            for dest, msg in result.messages:
                self.net.send(node_id, dest, msg, frame)
            self.monitor.observe_applied(node_id, result.applied, frame)
            events.extend(result.events)
        self.monitor.observe(frame, [self.nodes[i].replica for i in sorted(self.nodes)])
        return events

    def _move_agents(self):
        for node_id in sorted(self.nodes):
            registry = self.nodes[node_id].registry
            if node_id in self.holding:
                if registry.applied_index < self.holding[node_id]:
                    continue
                del self.holding[node_id]
            state = registry.agents.get(node_id)
            if state is not None:
                self.physical[node_id] = state.position

    def _reference_registry(self):
        if not self.nodes:
            return None
        node = max(self.nodes.values(), key=lambda n: (n.registry.applied_index, -n.id))
        return node.registry

    def _record_frame(self, frame, events):
        record = self.record
        reference = self._reference_registry()
        live = tuple(self.goals)
        if reference is not None:
            self.goals = assign_goals(goal_ids(reference, self.spec.failure_policy), self.spec.formation)
            live = tuple(a for a in reference.live_ids() if a in self.physical)
        elif record.live_agents:
            live = record.live_agents[-1]

        errors = {a: (self.physical[a] - goal).norm() for a, goal in sorted(self.goals.items()) if a in self.physical}
        steered = [a for a in live if a in self.goals]
        energy = 0.0
        if len(steered) > 1:
            energy = global_error(formation_errors(
                [self.physical[a] for a in steered], [self.goals[a] for a in steered],
                FormationGraph.complete(len(steered)),
            ))

        leader = self._leader()
        record.trajectories.append(dict(sorted(self.physical.items())))
        record.per_agent_error.append(errors)
        record.global_error.append(energy)
        record.live_agents.append(live)
        record.leaders.append(leader.id if leader else None)
        record.member_counts.append(len(leader.replica.members) if leader else None)
        record.quorums.append(leader.replica.quorum_size() if leader else None)
        record.events.extend(events)
        if frame % self.spec.view_every == 0:
            record.per_node_views[frame] = {i: self.nodes[i].registry.snapshot() for i in sorted(self.nodes)}

    def _finish(self):
        record = self.record
        record.final_positions = dict(sorted(self.physical.items()))
        for node_id in sorted(self.nodes):
            replica = self.nodes[node_id].replica
            record.final_roles[node_id] = replica.role.value
            record.final_terms[node_id] = replica.current_term
            record.final_logs[node_id] = tuple((e.index, e.term) for e in replica.log)
            record.final_commits[node_id] = replica.commit_index
        record.violations = list(self.monitor.violations)
        record.net_counters = self.net.counters()

    # ========== RUN ==========

    def run(self, spec):
        """
        Simulate a scenario.

        Raises:
            UnstableControllerError: stability guard violated (before frame 0)
        """
        self._setup(spec)
        self.status_message.emit(f"Scenario {spec.label}: {spec.agents} agents, {spec.frames} frames, seed {spec.seed}", 0)

        for frame in range(spec.frames):
            events = self._apply_faults(frame)
            self._submit_membership(frame)
            events.extend(self._step_nodes(frame))
            self._move_agents()
            self._record_frame(frame, events)
            self.frame_finished.emit(frame)

        self._finish()
        final = self.record.global_error[-1]
        self.status_message.emit(f"Scenario {spec.label} finished: E = {final:.6g}, "
                                 f"{len(self.record.violations)} safety violation(s)", 0)
        return self.record


def run_scenario(spec):
    return ScenarioRunner().run(spec)


def _run_and_summarize(spec):
    return summarize(run_scenario(spec))


@dataclass(frozen=True)
class BatchReport:
    passed: int
    failed: int
    summaries: tuple

    def failures(self):
        return [s for s in self.summaries if not s.safe]


def run_batch(specs, workers=1):
    """
    Run several specs and count safe / unsafe runs.

    Args:
        specs: Iterable of ScenarioSpec
        workers: Process count; 1 runs in this process
    """
    specs = list(specs)
    if workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_and_summarize, specs))
    else:
        summaries = [_run_and_summarize(spec) for spec in specs]

    passed = sum(1 for s in summaries if s.safe)
    for s in summaries:
        if not s.safe:
            logger.warning("Scenario %s seed %s: %s", s.label, s.seed, "; ".join(map(str, s.violations)))
    return BatchReport(passed, len(summaries) - passed, tuple(summaries))
