import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import networkx as nx
import numpy as np

# Controller defaults
DEFAULT_GAIN = 1.0
DEFAULT_DT = 0.05
DEFAULT_ANCHOR_GAIN = 4.0
DEFAULT_RADIUS = 1.0
STABILITY_LIMIT = 2.0


class FormationError(ValueError):
    """Invalid formation input (vectors, graphs, polygon templates)."""


class UnstableControllerError(FormationError):
    """Gain / dt combination violates the Euler stability guard."""


@dataclass(frozen=True)
class Vec2:
    """2D position / velocity vector."""

    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise FormationError(f"Non-finite vector ({self.x}, {self.y})")

    def __add__(self, other):
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other):
        return Vec2(self.x - other.x, self.y - other.y)

    def __neg__(self):
        return Vec2(-self.x, -self.y)

    def __mul__(self, k):
        return Vec2(self.x * k, self.y * k)

    __rmul__ = __mul__

    def norm_sq(self):
        return self.x * self.x + self.y * self.y

    def norm(self):
        return math.hypot(self.x, self.y)

    def as_tuple(self):
        return (self.x, self.y)


ORIGIN = Vec2(0.0, 0.0)


class FormationGraph:
    """
    Undirected formation graph G = (V, E) over vertices 0..n-1.

    Args:
        n: Number of vertices (agents), at least 1
        edges: Iterable of (i, j) pairs; no self-loops, no duplicates

    Raises:
        FormationError: on invalid vertices, duplicates or a disconnected graph
    """

    def __init__(self, n, edges):
        if n < 1:
            raise FormationError(f"Formation graph needs at least one vertex, got {n}")

        seen = set()
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise FormationError(f"Edge ({i}, {j}) outside vertex range 0..{n - 1}")
            if i == j:
                raise FormationError(f"Self-loop on vertex {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise FormationError(f"Duplicate edge {key}")
            seen.add(key)

        graph = nx.Graph()
        graph.add_nodes_from(range(n))
        graph.add_edges_from(seen)
        if not nx.is_connected(graph):
            raise FormationError("Formation graph must be connected")

        self._graph = graph
        self._n = n
        self._edges = tuple(sorted(seen))

    @classmethod
    def complete(cls, n):
        return _complete_graph(n)

    @classmethod
    def path(cls, n):
        return cls(n, [(i, i + 1) for i in range(n - 1)])

    @property
    def n(self):
        return self._n

    @property
    def edges(self):
        """Edges as sorted (i, j) pairs with i < j."""
        return self._edges

    @property
    def max_degree(self):
        return max((d for _, d in self._graph.degree()), default=0)

    @cached_property
    def _laplacian(self):
        adjacency = nx.to_numpy_array(self._graph, nodelist=range(self._n), dtype=float)
        lap = np.diag(adjacency.sum(axis=1)) - adjacency
        lap.setflags(write=False)
        return lap

    def __repr__(self):
        return f"FormationGraph(n={self._n}, edges={len(self._edges)})"


@lru_cache(maxsize=64)
def _complete_graph(n):
    return FormationGraph(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


@dataclass(frozen=True)
class ControllerConfig:
    """Formation controller tunables (gain k, integration step dt, anchor gain)."""

    gain: float = DEFAULT_GAIN
    dt: float = DEFAULT_DT
    anchor_gain: float = DEFAULT_ANCHOR_GAIN

    def __post_init__(self):
        if not self.gain > 0:
            raise FormationError(f"Controller gain must be positive, got {self.gain}")
        if not self.dt > 0:
            raise FormationError(f"dt must be positive, got {self.dt}")
        if self.anchor_gain < 0:
            raise FormationError(f"Anchor gain must be non-negative, got {self.anchor_gain}")

    def stability_product(self, max_degree):
        # lambda_max(L) <= 2 * max degree
        return self.dt * (self.gain * 2.0 * max_degree + self.anchor_gain)

    def check_stability(self, graph):
        """
        Enforce dt * (k * lambda_max + anchor) < 2 using the degree bound.

        Args:
            graph: FormationGraph, or an int giving the maximum vertex degree

        Raises:
            UnstableControllerError: when the guard is violated
        """
        max_degree = graph if isinstance(graph, int) else graph.max_degree
        product = self.stability_product(max_degree)
        if product >= STABILITY_LIMIT:
            raise UnstableControllerError(
                f"Unstable controller: dt*(k*2*{max_degree} + anchor) = {product:.4f} >= {STABILITY_LIMIT}"
            )


@dataclass(frozen=True)
class FormationSpec:
    """Regular polygon template: vertex i sits at angle 2*pi*i/sides + phase."""

    sides: int
    radius: float = DEFAULT_RADIUS
    center: Vec2 = field(default=ORIGIN)
    phase: float = 0.0

    def __post_init__(self):
        if self.sides < 1:
            raise FormationError(f"Polygon needs at least one side, got {self.sides}")
        if not self.radius > 0:
            raise FormationError(f"Polygon radius must be positive, got {self.radius}")
        if not math.isfinite(self.phase):
            raise FormationError(f"Non-finite polygon phase {self.phase}")

    def with_sides(self, sides):
        return FormationSpec(sides, self.radius, self.center, self.phase)


def polygon_goals(spec):
    """Polygon vertices in index order, all at distance radius from the center."""
    goals = []
    for i in range(spec.sides):
        angle = 2.0 * math.pi * i / spec.sides + spec.phase
        goals.append(Vec2(spec.center.x + spec.radius * math.cos(angle),
                          spec.center.y + spec.radius * math.sin(angle)))
    return goals


def assign_goals(agent_ids, template, sides=None):
    """
    Assign polygon vertices to agents by sorted id.

    Args:
        agent_ids: Agents sharing the polygon
        template: FormationSpec supplying radius, center and phase
        sides: Polygon size, defaults to the number of agents

    Returns:
        dict agent id -> goal Vec2
    """
    ordered = sorted(agent_ids)
    if not ordered:
        return {}
    vertices = polygon_goals(template.with_sides(sides or len(ordered)))
    return {agent: vertices[rank] for rank, agent in enumerate(ordered)}


def laplacian(graph):
    """L = D - A (read-only array)."""
    return graph._laplacian


def _as_array(vectors):
    return np.array([[v.x, v.y] for v in vectors], dtype=float).reshape(-1, 2)


def _as_vectors(array):
    return [Vec2(float(x), float(y)) for x, y in array]


def _check_lengths(graph, *sequences):
    for seq in sequences:
        if len(seq) != graph.n:
            raise FormationError(f"Expected {graph.n} vectors, got {len(seq)}")


def _relative_errors(X, G):
    # E[i, j] = (x_j - x_i) - (x_j* - x_i*)
    return (X[None, :, :] - X[:, None, :]) - (G[None, :, :] - G[:, None, :])


def formation_errors(positions, goals, graph):
    """
    Formation errors e_ij = d_ij - d_ij* for every edge, both orientations.

    Args:
        positions: Current positions x_i
        goals: Desired positions x_i*
        graph: FormationGraph

    Returns:
        dict (i, j) -> Vec2, holding (i, j) and (j, i) for each edge
    """
    _check_lengths(graph, positions, goals)
    errors = {}
    for i, j in graph.edges:
        d_ij = positions[j] - positions[i]
        d_star = goals[j] - goals[i]
        errors[(i, j)] = d_ij - d_star
        errors[(j, i)] = (positions[i] - positions[j]) - (goals[i] - goals[j])
    return errors


def control_inputs(positions, goals, graph, config):
    """u_i = -k * sum_{j != i} L_ij e_ij, evaluated over the off-diagonal Laplacian."""
    _check_lengths(graph, positions, goals)
    off_diagonal = np.array(laplacian(graph))
    np.fill_diagonal(off_diagonal, 0.0)
    errors = _relative_errors(_as_array(positions), _as_array(goals))
    inputs = -config.gain * np.einsum("ij,ijk->ik", off_diagonal, errors)
    return _as_vectors(inputs)


def anchor_inputs(positions, goals, gain):
    """Pinning term a_i = -gain * (x_i - x_i*)."""
    if len(positions) != len(goals):
        raise FormationError(f"Expected {len(goals)} positions, got {len(positions)}")
    delta = _as_array(positions) - _as_array(goals)
    return _as_vectors(-gain * delta)


def euler_step(positions, inputs, dt):
    """x_i <- x_i + dt * u_i."""
    if len(positions) != len(inputs):
        raise FormationError(f"{len(positions)} positions but {len(inputs)} inputs")
    if not dt > 0:
        raise FormationError(f"dt must be positive, got {dt}")
    return _as_vectors(_as_array(positions) + dt * _as_array(inputs))


def global_error(errors):
    """E = 0.5 * sum over unordered edges of |e_ij|^2."""
    return 0.5 * sum(e.norm_sq() for (i, j), e in errors.items() if i < j)


def formation_step(positions, goals, graph, config):
    """One leader control step: Laplacian law plus anchor, integrated over dt."""
    inputs = control_inputs(positions, goals, graph, config)
    if config.anchor_gain > 0:
        pins = anchor_inputs(positions, goals, config.anchor_gain)
        inputs = [u + p for u, p in zip(inputs, pins)]
    return euler_step(positions, inputs, config.dt)
