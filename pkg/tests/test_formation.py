import math

import numpy as np
import pytest

from Core.Core_Formation import (
    ControllerConfig,
    FormationError,
    FormationGraph,
    FormationSpec,
    UnstableControllerError,
    Vec2,
    anchor_inputs,
    assign_goals,
    control_inputs,
    euler_step,
    formation_errors,
    formation_step,
    global_error,
    laplacian,
    polygon_goals,
)

NO_ANCHOR = ControllerConfig(gain=1.0, dt=0.05, anchor_gain=0.0)


def random_points(seed, n):
    rng = np.random.default_rng(seed)
    return [Vec2(x, y) for x, y in rng.uniform(-2.0, 2.0, size=(n, 2))]


def as_array(vectors):
    return np.array([v.as_tuple() for v in vectors])


# ========== Vec2 / graph construction ==========

def test_vec2_arithmetic():
    a = Vec2(1, 2)
    b = Vec2(0.5, -1)
    assert a + b == Vec2(1.5, 1)
    assert a - b == Vec2(0.5, 3)
    assert -a == Vec2(-1, -2)
    assert 2 * a == a * 2 == Vec2(2, 4)
    assert Vec2(3, 4).norm() == 5.0
    assert Vec2(3, 4).norm_sq() == 25.0


@pytest.mark.parametrize("x, y", [(math.nan, 0.0), (0.0, math.inf)])
def test_vec2_rejects_non_finite(x, y):
    with pytest.raises(FormationError):
        Vec2(x, y)


@pytest.mark.parametrize("n, edges", [
    (0, []),
    (3, [(0, 1)]),              # disconnected
    (2, [(0, 0), (0, 1)]),      # self-loop
    (2, [(0, 1), (1, 0)]),      # duplicate
    (2, [(0, 2)]),              # out of range
])
def test_invalid_graphs_rejected(n, edges):
    with pytest.raises(FormationError):
        FormationGraph(n, edges)


def test_single_vertex_graph():
    graph = FormationGraph.complete(1)
    assert graph.edges == ()
    assert laplacian(graph).tolist() == [[0.0]]


# ========== polygon_goals / assign_goals ==========

def test_square_vertices():
    goals = polygon_goals(FormationSpec(sides=4, radius=1.0))
    expected = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    for goal, (x, y) in zip(goals, expected):
        assert goal.x == pytest.approx(x, abs=1e-15)
        assert goal.y == pytest.approx(y, abs=1e-15)


def test_single_vertex_polygon():
    assert polygon_goals(FormationSpec(sides=1, radius=2.0)) == [Vec2(2.0, 0.0)]


def test_pentagon_side_length():
    goals = polygon_goals(FormationSpec(sides=5))
    for i in range(5):
        side = (goals[(i + 1) % 5] - goals[i]).norm()
        assert side == pytest.approx(2 * math.sin(math.radians(36)), abs=1e-12)
        assert goals[i].norm() == pytest.approx(1.0)


@pytest.mark.parametrize("sides, radius", [(0, 1.0), (3, 0.0), (3, -1.0)])
def test_bad_polygon_rejected(sides, radius):
    with pytest.raises(FormationError):
        FormationSpec(sides=sides, radius=radius)


def test_goals_assigned_by_sorted_id():
    goals = assign_goals([7, 3, 5], FormationSpec(sides=1))
    vertices = polygon_goals(FormationSpec(sides=3))
    assert goals == {3: vertices[0], 5: vertices[1], 7: vertices[2]}
    assert assign_goals([], FormationSpec(sides=1)) == {}


# ========== laplacian ==========

def test_laplacian_complete_and_path():
    assert laplacian(FormationGraph.complete(3)).tolist() == [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]]
    assert laplacian(FormationGraph.path(3)).tolist() == [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]


@pytest.mark.parametrize("seed", range(5))
def test_laplacian_properties_on_random_connected_graphs(seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(5).tolist()
    edges = {tuple(sorted((order[i], order[i + 1]))) for i in range(4)}
    for i, j in rng.integers(0, 5, size=(4, 2)).tolist():
        if i != j:
            edges.add((min(i, j), max(i, j)))
    lap = laplacian(FormationGraph(5, sorted(edges)))

    assert np.array_equal(lap, lap.T)
    assert np.all(lap.sum(axis=1) == 0)
    off_diagonal = lap[~np.eye(5, dtype=bool)]
    assert set(off_diagonal.tolist()) <= {0.0, -1.0}
    assert np.linalg.eigvalsh(lap)[0] == pytest.approx(0.0, abs=1e-10)


# ========== errors / inputs / euler ==========

def test_formation_error_example():
    errors = formation_errors([Vec2(0, 0), Vec2(2, 0)], [Vec2(0, 0), Vec2(1, 0)], FormationGraph.complete(2))
    assert errors[(0, 1)] == Vec2(1, 0)
    assert errors[(1, 0)] == Vec2(-1, 0)


def test_formation_errors_antisymmetric():
    graph = FormationGraph.complete(6)
    positions = random_points(1, 6)
    goals = polygon_goals(FormationSpec(sides=6))
    errors = formation_errors(positions, goals, graph)
    for i, j in graph.edges:
        assert errors[(j, i)] == -errors[(i, j)]


def test_formation_errors_length_mismatch():
    with pytest.raises(FormationError):
        formation_errors([Vec2(0, 0)], [Vec2(0, 0), Vec2(1, 0)], FormationGraph.complete(2))


def test_translated_goals_have_zero_error():
    goals = polygon_goals(FormationSpec(sides=4))
    shifted = [g + Vec2(0.5, -0.25) for g in goals]
    errors = formation_errors(shifted, goals, FormationGraph.complete(4))
    assert all(e.norm() < 1e-14 for e in errors.values())


def test_two_agent_control_example():
    inputs = control_inputs([Vec2(0, 0), Vec2(2, 0)], [Vec2(0, 0), Vec2(1, 0)],
                            FormationGraph.complete(2), NO_ANCHOR)
    assert inputs == [Vec2(1, 0), Vec2(-1, 0)]


def test_translation_invariance_is_exact():
    graph = FormationGraph.complete(4)
    positions = [Vec2(0.5, 1.25), Vec2(-1.0, 0.75), Vec2(2.0, -0.5), Vec2(-0.25, -1.5)]
    goals = polygon_goals(FormationSpec(sides=4))
    shift = Vec2(0.5, -0.25)
    moved = [p + shift for p in positions]

    assert formation_errors(moved, goals, graph) == formation_errors(positions, goals, graph)
    assert control_inputs(moved, goals, graph, NO_ANCHOR) == control_inputs(positions, goals, graph, NO_ANCHOR)


@pytest.mark.parametrize("seed", range(10))
def test_centroid_conserved_on_complete_graph(seed):
    positions = random_points(seed, 7)
    goals = polygon_goals(FormationSpec(sides=7))
    inputs = as_array(control_inputs(positions, goals, FormationGraph.complete(7), NO_ANCHOR))
    assert np.abs(inputs.sum(axis=0)).max() < 1e-12


def test_euler_step():
    assert euler_step([Vec2(1, 1)], [Vec2(2, -2)], 0.5) == [Vec2(2, 0)]
    positions = random_points(3, 3)
    assert euler_step(positions, [Vec2(0, 0)] * 3, 0.05) == positions
    with pytest.raises(FormationError):
        euler_step([Vec2(1, 1)], [Vec2(0, 0)], 0.0)


def test_global_error():
    assert global_error({}) == 0.0
    assert global_error({(0, 1): Vec2(3, 4), (1, 0): Vec2(-3, -4)}) == 12.5


def test_anchor_pulls_towards_goal():
    assert anchor_inputs([Vec2(2, 1)], [Vec2(1, 0)], 4.0) == [Vec2(-4, -4)]


# ========== pipeline ==========

def test_goals_are_a_fixed_point():
    goals = polygon_goals(FormationSpec(sides=5))
    assert formation_step(goals, goals, FormationGraph.complete(5), ControllerConfig()) == goals


@pytest.mark.parametrize("graph", [FormationGraph.complete(5), FormationGraph.path(6), FormationGraph.complete(10)],
                         ids=["complete5", "path6", "complete10"])
def test_matches_dense_oracle_and_converges(graph):
    n = graph.n
    goals = polygon_goals(FormationSpec(sides=n))
    positions = random_points(42, n)
    NO_ANCHOR.check_stability(graph)

    lap = np.array(laplacian(graph))
    G = as_array(goals)
    X = as_array(positions)
    energy = global_error(formation_errors(positions, goals, graph))

    for frame in range(1, 1001):
        positions = formation_step(positions, goals, graph, NO_ANCHOR)
        X = X - NO_ANCHOR.dt * NO_ANCHOR.gain * lap @ (X - G)
        assert np.allclose(as_array(positions), X, rtol=0, atol=1e-9)
        next_energy = global_error(formation_errors(positions, goals, graph))
        assert next_energy <= energy + 1e-20
        energy = next_energy

    assert energy < 1e-8


def test_anchor_reaches_absolute_goal_for_single_agent():
    graph = FormationGraph.complete(1)
    goal = polygon_goals(FormationSpec(sides=1))
    positions = [Vec2(1.5, -0.7)]
    for _ in range(300):
        positions = formation_step(positions, goal, graph, ControllerConfig())
    assert (positions[0] - goal[0]).norm() < 1e-12


def test_stability_guard():
    ControllerConfig().check_stability(FormationGraph.complete(5))
    ControllerConfig().check_stability(4)
    with pytest.raises(UnstableControllerError):
        ControllerConfig(gain=10.0, dt=0.1).check_stability(FormationGraph.complete(5))


@pytest.mark.parametrize("kwargs", [{"gain": 0.0}, {"dt": -0.1}, {"anchor_gain": -1.0}])
def test_controller_config_validation(kwargs):
    with pytest.raises(FormationError):
        ControllerConfig(**kwargs)
