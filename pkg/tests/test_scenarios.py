import math

import pytest

from Core.Core_ClusterNode import AgentRegistry, FailurePolicy, ScriptedRotation, apply_committed
from Core.Core_Events import EventRecord, EventType
from Core.Core_Formation import FormationSpec, UnstableControllerError, Vec2, assign_goals
from Core.Core_RaftReplica import AddMember, PositionBatch, Role
from Core.Core_SimNet import CrashNode, RecoverNode
from Lib.Lib_Scenarios import (
    RunRecord,
    ScenarioError,
    ScenarioRunner,
    build_scenario,
    build_stress_scenario,
    run_batch,
    run_scenario,
    summarize,
)

TEMPLATE = FormationSpec(sides=1)


def run_with_runner(spec):
    runner = ScenarioRunner()
    record = runner.run(spec)
    return runner, record


def events_of(record, kind):
    return [e for e in record.events if e.type is kind]


def leader_changes(record):
    return [f for f in range(1, record.frame_count) if record.leaders[f] != record.leaders[f - 1]]


def assert_registries_follow_their_logs(runner):
    for node in runner.nodes.values():
        fresh = AgentRegistry.from_positions(runner.initial, spawn_seed=runner.spec.seed)
        apply_committed(fresh, node.replica.log[:node.registry.applied_index])
        assert fresh == node.registry


@pytest.fixture(scope="module")
def scenario_a():
    return run_with_runner(build_scenario("A"))


@pytest.fixture(scope="module")
def record_b():
    return run_scenario(build_scenario("B"))


@pytest.fixture(scope="module")
def scenario_f():
    return run_with_runner(build_scenario("F"))


@pytest.fixture(scope="module")
def scenario_g():
    return run_with_runner(build_scenario("G", frames=400))


# ========== build_scenario ==========

def test_build_a():
    spec = build_scenario("A")
    assert spec.leadership == ScriptedRotation(20, 35, ())
    assert spec.failure_policy is FailurePolicy.LEADER_ROLE_ONLY
    assert (spec.agents, spec.frames) == (5, 60)
    assert build_scenario("a") == spec


def test_build_b():
    spec = build_scenario("B")
    assert tuple(spec.faults) == (CrashNode(1, 35),)
    assert spec.failure_policy is FailurePolicy.FREEZE_AGENT
    assert spec.leadership == ScriptedRotation(20, None, ((1, 35, None),))


def test_build_c_with_overrides():
    spec = build_scenario("C", m=2, n=6)
    assert spec.agents == 6
    assert spec.failure_policy is FailurePolicy.SHRINK_FORMATION
    assert tuple(spec.faults) == (CrashNode(1, 30), CrashNode(2, 30))
    assert spec.leadership.excluded == ((1, 30, None), (2, 30, None))


@pytest.mark.parametrize("overrides", [{"m": 0}, {"m": 5}, {"m": 3}], ids=["none", "all", "no-majority"])
def test_build_c_rejects_bad_failure_counts(overrides):
    with pytest.raises(ScenarioError):
        build_scenario("C", **overrides)


def test_build_f():
    spec = build_scenario("F")
    assert tuple(spec.faults) == (CrashNode(1, 10), RecoverNode(1, 20))
    assert spec.timers.first_timeouts == ((1, 5),)
    assert spec.agents == 3


def test_build_g():
    spec = build_scenario("G")
    assert spec.membership == ((AddMember(4), 50),)
    assert spec.all_agents() == [0, 1, 2, 3, 4]


def test_seed_reaches_every_stream():
    spec = build_scenario("D", seed=9)
    assert spec.seed == spec.timers.seed == spec.net.seed == 9


@pytest.mark.parametrize("label, overrides", [
    ("Z", {}),
    ("D", {"wings": 2}),
    ("D", {"agents": 0}),
    ("D", {"radius": -1.0}),
    ("D", {"election_timeout_min": 1}),
    ("D", {"faults": [CrashNode(7, 3)]}),
    ("B", {"agents": 0}),
    ("B", {"period": 0}),
    ("A", {"period": 0}),
    ("C", {"period": -5}),
])
def test_build_rejects(label, overrides):
    with pytest.raises(ScenarioError):
        build_scenario(label, **overrides)


def test_stress_scenario_is_seeded():
    assert build_stress_scenario(4) == build_stress_scenario(4)
    assert build_stress_scenario(4).faults != build_stress_scenario(5).faults


# ========== Scenario A ==========

def test_a_rotates_at_20_and_hands_over_at_35(scenario_a):
    _, record = scenario_a
    assert leader_changes(record) == [20, 35]
    assert (record.leaders[0], record.leaders[20], record.leaders[35]) == (0, 1, 2)
    leaders = [(e.node, e.term, e.frame) for e in events_of(record, EventType.LEADER)]
    assert leaders == [(0, 1, 0), (1, 2, 20), (2, 3, 35)]
    assert events_of(record, EventType.CANDIDATE) == []


def test_a_failed_leader_agent_still_steered(scenario_a):
    _, record = scenario_a
    assert record.trajectories[59][1] != record.trajectories[36][1]
    assert all(error < 1e-3 for error in record.per_agent_error[-1].values())
    assert summarize(record).safe


def test_a_error_smooth_across_leader_changes(scenario_a):
    runner, _ = scenario_a
    replica = runner.nodes[0].replica
    goals = assign_goals(range(5), TEMPLATE)
    states = [runner.initial] + [
        e.command.as_dict() for e in replica.log[:replica.commit_index] if isinstance(e.command, PositionBatch)
    ]
    distances = [math.sqrt(sum((state[a] - goals[a]).norm_sq() for a in goals)) for state in states]
    assert len(distances) > 50
    for before, after in zip(distances, distances[1:]):
        assert after <= before + 1e-9


def test_a_registries_follow_logs(scenario_a):
    assert_registries_follow_their_logs(scenario_a[0])


# ========== Scenario B ==========

def test_b_failed_agent_frozen_exactly(record_b):
    frozen = record_b.trajectories[35][1]
    assert all(positions[1] == frozen for positions in record_b.trajectories[35:])
    assert record_b.final_positions[1] == frozen


def test_b_others_converge_on_full_polygon(record_b):
    final = record_b.per_agent_error[-1]
    assert all(final[a] < 1e-3 for a in (0, 2, 3, 4))
    goals = assign_goals(range(5), TEMPLATE)
    assert (record_b.final_positions[3] - goals[3]).norm() < 1e-3


def test_b_failure_detected_and_member_removed(record_b):
    assert EventRecord(EventType.SIMULATE_FAILURE, 1, 2, 35) in record_b.events
    assert any(e.node == 1 for e in events_of(record_b, EventType.FAILURE))
    assert record_b.member_counts[-1] == 4
    assert record_b.quorums[-1] == 3
    assert record_b.live_agents[-1] == (0, 2, 3, 4)
    assert summarize(record_b).safe


# ========== Scenario C ==========

def test_c_survivors_form_smaller_polygon():
    record = run_scenario(build_scenario("C", n=6, m=2, frames=300))
    survivors = (0, 3, 4, 5)
    goals = assign_goals(survivors, TEMPLATE)

    assert record.live_agents[-1] == survivors
    for agent in survivors:
        assert record.final_positions[agent].x == pytest.approx(goals[agent].x, abs=1e-3)
        assert record.final_positions[agent].y == pytest.approx(goals[agent].y, abs=1e-3)
    for agent in (1, 2):
        assert all(p[agent] == record.trajectories[30][agent] for p in record.trajectories[30:])
    assert record.member_counts[-1] == 4
    assert summarize(record).safe


# ========== Scenarios D and E ==========

def test_d_elects_one_leader_per_term_and_converges():
    record = run_scenario(build_scenario("D", seed=1))
    summary = summarize(record)
    assert summary.safe
    assert summary.leaders_per_term and set(summary.leaders_per_term.values()) == {1}
    assert summary.convergence_frame is not None
    assert all(error < 1e-3 for error in record.per_agent_error[-1].values())


def test_e_candidate_precedes_leader():
    record = run_scenario(build_scenario("E"))
    leaders = events_of(record, EventType.LEADER)
    assert leaders
    for leader in leaders:
        candidacy = [e for e in events_of(record, EventType.CANDIDATE) if (e.node, e.term) == (leader.node, leader.term)]
        assert candidacy and candidacy[0].frame <= leader.frame
    assert sorted(record.final_roles.values()) == ["follower", "follower", "leader"]


# ========== Scenario F ==========

def test_f_fault_events(scenario_f):
    _, record = scenario_f
    assert events_of(record, EventType.SIMULATE_FAILURE) == [EventRecord(EventType.SIMULATE_FAILURE, 1, 1, 10)]
    assert events_of(record, EventType.SIMULATE_RECOVERY) == [EventRecord(EventType.SIMULATE_RECOVERY, 1, 1, 20)]


def test_f_first_leader_then_reelection(scenario_f):
    _, record = scenario_f
    leaders = events_of(record, EventType.LEADER)
    assert (leaders[0].node, leaders[0].term) == (1, 1)
    assert leaders[0].frame < 10
    assert any(e.term > 1 and e.frame > 10 and e.node != 1 for e in leaders)


def test_f_failure_detected_in_time(scenario_f):
    _, record = scenario_f
    summary = summarize(record)
    assert summary.safe
    ((node, crashed_at, latency),) = summary.detection_latencies
    assert (node, crashed_at) == (1, 10)
    assert latency is not None and latency <= 12


def test_f_recovered_node_rejoins(scenario_f):
    runner, record = scenario_f
    assert record.final_roles[1] == "follower"
    leader = record.leaders[-1]
    assert leader is not None and leader != 1
    ours, theirs = record.final_logs[1], record.final_logs[leader]
    common = min(len(ours), len(theirs))
    assert common > 0 and ours[:common] == theirs[:common]
    assert record.final_commits[1] > 0
    assert_registries_follow_their_logs(runner)


def test_f_recovered_agent_moves_again(scenario_f):
    _, record = scenario_f
    assert record.trajectories[15][1] == record.trajectories[10][1]
    assert record.trajectories[-1][1] != record.trajectories[20][1]


# ========== Scenario G ==========

def test_g_join_grows_cluster(scenario_g):
    _, record = scenario_g
    assert record.member_counts[49] == 4
    assert record.member_counts[50] == 5
    assert record.quorums[50] == 3
    assert 4 not in record.trajectories[49]
    assert record.live_agents[-1] == (0, 1, 2, 3, 4)


def test_g_all_agents_converge(scenario_g):
    runner, record = scenario_g
    final = record.per_agent_error[-1]
    assert sorted(final) == [0, 1, 2, 3, 4]
    assert all(error < 1e-3 for error in final.values())
    assert summarize(record).safe
    assert_registries_follow_their_logs(runner)


def test_g_leader_skips_control_until_join_commits():
    runner = ScenarioRunner()
    seen = {}

    def on_frame(frame):
        leader = next((n for n in runner.nodes.values() if n.replica.role is Role.LEADER), None)
        if leader is not None:
            batch = leader.last_batch
            seen[frame] = (sorted(batch.as_dict()) if batch else None, 4 in leader.registry.agents)

    runner.frame_finished.connect(on_frame)
    runner.run(build_scenario("G", frames=70))

    assert seen[50] == (None, False)
    assert all(4 not in (steered or ()) for f, (steered, _) in seen.items() if f < 50)
    for frame in range(50, 70):
        steered, joined = seen[frame]
        assert (steered is None) == (not joined)
        assert steered in (None, [0, 1, 2, 3, 4])
    assert seen[69][0] == [0, 1, 2, 3, 4]


# ========== runner ==========

def test_single_agent_converges_to_polygon_point():
    record = run_scenario(build_scenario("D", agents=1, frames=200))
    rows = [(e.type, e.node, e.term) for e in record.events]
    assert rows == [(EventType.CANDIDATE, 0, 1), (EventType.LEADER, 0, 1)]
    assert (record.final_positions[0] - Vec2(1.0, 0.0)).norm() < 1e-9
    assert set(record.global_error) == {0.0}


def test_same_seed_same_record():
    first = run_scenario(build_scenario("D", seed=3, frames=80))
    second = run_scenario(build_scenario("D", seed=3, frames=80))
    assert first == second
    assert first.trajectories != run_scenario(build_scenario("D", seed=4, frames=80)).trajectories


def test_views_sampled_every_five_frames():
    record = run_scenario(build_scenario("E", frames=23))
    assert sorted(record.per_node_views) == [0, 5, 10, 15, 20]
    assert sorted(record.per_node_views[20]) == [0, 1, 2]


def test_unstable_controller_aborts_before_first_frame():
    runner = ScenarioRunner()
    finished = []
    runner.frame_finished.connect(finished.append)
    with pytest.raises(UnstableControllerError):
        runner.run(build_scenario("D", gain=50.0))
    assert finished == []


def test_runner_signals():
    runner = ScenarioRunner()
    messages, finished = [], []
    runner.status_message.connect(lambda text, timeout: messages.append(text))
    runner.frame_finished.connect(finished.append)
    runner.run(build_scenario("F", frames=30))
    assert finished == list(range(30))
    assert any("simulate failure" in text for text in messages)


# ========== summarize / batch ==========

def test_summary_of_converged_record():
    record = RunRecord(per_agent_error=[{0: 0.0}, {0: 0.0}], global_error=[0.0, 0.0], live_agents=[(0,), (0,)])
    summary = summarize(record)
    assert summary.convergence_frame == 0
    assert summary.final_error == 0.0
    assert summary.safe


def test_summary_without_convergence():
    record = RunRecord(per_agent_error=[{0: 0.5}], global_error=[0.1], live_agents=[(0,)])
    assert summarize(record).convergence_frame is None


def test_summary_flags_two_leaders_in_one_term():
    record = RunRecord(events=[EventRecord(EventType.LEADER, 0, 1, 5), EventRecord(EventType.LEADER, 1, 1, 9)])
    summary = summarize(record)
    assert not summary.safe
    assert summary.leaders_per_term == {1: 2}


def test_batch_counts():
    report = run_batch([build_scenario("E", seed=s, frames=60) for s in range(3)])
    assert (report.passed, report.failed) == (3, 0)
    assert [s.seed for s in report.summaries] == [0, 1, 2]
    assert report.failures() == []
