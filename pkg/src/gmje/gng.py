"""Growing Neural Gas over a stream of joint embeddings."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSeed


@dataclass(frozen=True)
class GngConfig:
    epsilon_b: float = 0.2
    epsilon_n: float = 0.01
    lambda_interval: int = 100
    a_max: int = 50
    alpha: float = 0.5
    beta: float = 0.995
    k_max: int = 25

    def __post_init__(self) -> None:
        if not 0 < self.epsilon_n <= self.epsilon_b < 1:
            raise ValueError("need 0 < epsilon_n <= epsilon_b < 1")
        if self.lambda_interval < 1 or self.a_max < 1:
            raise ValueError("lambda_interval and a_max must be >= 1")
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.k_max < 2:
            raise ValueError("k_max must be >= 2")


def _key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass
class GngGraph:
    """Nodes keyed by integer id (ids are never reused); edges map id pairs to ages.

    ``nn_ops`` counts scalar distance terms evaluated by the nearest-pair scan.
    """

    positions: dict[int, np.ndarray]
    errors: dict[int, float]
    edges: dict[tuple[int, int], int]
    step_counter: int = 0
    next_id: int = 0
    nn_ops: int = 0
    last_quantization: float = field(default=float("nan"))

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.positions)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def neighbors(self, node: int) -> list[int]:
        return sorted(b if a == node else a for (a, b) in self.edges if node in (a, b))

    def copy(self) -> "GngGraph":
        return copy.deepcopy(self)

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": i, "position": self.positions[i].tolist(), "error": self.errors[i]}
                for i in self.node_ids
            ],
            "edges": [{"u": a, "v": b, "age": age} for (a, b), age in sorted(self.edges.items())],
            "step_counter": self.step_counter,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GngGraph":
        pos = {n["id"]: np.asarray(n["position"], dtype=float) for n in obj["nodes"]}
        err = {n["id"]: float(n["error"]) for n in obj["nodes"]}
        edges = {_key(e["u"], e["v"]): int(e["age"]) for e in obj["edges"]}
        return cls(pos, err, edges, int(obj.get("step_counter", 0)), max(pos, default=-1) + 1)


def gng_init(seed_points: np.ndarray) -> GngGraph:
    pts = np.asarray(seed_points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] != 2:
        raise ValueError("expected exactly two seed points")
    if np.array_equal(pts[0], pts[1]):
        raise DegenerateSeed("seed points are identical")
    return GngGraph({0: pts[0].copy(), 1: pts[1].copy()}, {0: 0.0, 1: 0.0}, {(0, 1): 0}, 0, 2)


def gng_init_from_data(data: np.ndarray, rng: np.random.Generator) -> GngGraph:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    for _ in range(100):
        i, j = rng.choice(data.shape[0], size=2, replace=False)
        if not np.array_equal(data[i], data[j]):
            return gng_init(data[[i, j]])
    raise DegenerateSeed("could not find two distinct seed points")


def _nearest_two(graph: GngGraph, z: np.ndarray) -> tuple[int, int, float]:
    ids = graph.node_ids
    pos = np.stack([graph.positions[i] for i in ids])
    d2 = np.sum((pos - z) ** 2, axis=1)
    graph.nn_ops += pos.size
    # stable sort keeps the lowest id first among equal distances
    order = np.argsort(d2, kind="stable")
    return ids[order[0]], ids[order[1]], float(d2[order[0]])


def _remove_isolated(graph: GngGraph) -> None:
    linked = {n for e in graph.edges for n in e}
    for i in [i for i in graph.positions if i not in linked]:
        del graph.positions[i]
        del graph.errors[i]


def _insert(graph: GngGraph, cfg: GngConfig) -> None:
    ids = graph.node_ids
    u = max(ids, key=lambda i: (graph.errors[i], -i))
    nbrs = graph.neighbors(u)
    if not nbrs:
        return
    v = max(nbrs, key=lambda i: (graph.errors[i], -i))
    w = graph.next_id
    graph.next_id += 1
    graph.positions[w] = 0.5 * (graph.positions[u] + graph.positions[v])
    del graph.edges[_key(u, v)]
    graph.edges[_key(u, w)] = 0
    graph.edges[_key(v, w)] = 0
    graph.errors[u] *= cfg.alpha
    graph.errors[v] *= cfg.alpha
    graph.errors[w] = graph.errors[u]


def gng_step(graph: GngGraph, z: np.ndarray, cfg: GngConfig) -> GngGraph:
    """One online update, applied in place; the same graph is returned."""
    z = np.asarray(z, dtype=float)
    s1, s2, d2 = _nearest_two(graph, z)
    graph.last_quantization = d2
    graph.errors[s1] += d2

    graph.positions[s1] = graph.positions[s1] + cfg.epsilon_b * (z - graph.positions[s1])
    for nb in graph.neighbors(s1):
        graph.positions[nb] = graph.positions[nb] + cfg.epsilon_n * (z - graph.positions[nb])

    graph.edges[_key(s1, s2)] = 0
    for e in graph.edges:
        if s1 in e:
            graph.edges[e] += 1
    for e in [e for e, age in graph.edges.items() if age > cfg.a_max]:
        del graph.edges[e]
    _remove_isolated(graph)

    graph.step_counter += 1
    if graph.step_counter % cfg.lambda_interval == 0 and graph.n_nodes < cfg.k_max:
        _insert(graph, cfg)

    for i in graph.errors:
        graph.errors[i] *= cfg.beta
    return graph


def gng_extract_prototypes(graph: GngGraph) -> np.ndarray:
    return np.stack([graph.positions[i] for i in graph.node_ids])


def gng_components(graph: GngGraph) -> int:
    """Connected components of the edge graph."""
    parent = {i: i for i in graph.positions}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in graph.edges:
        parent[find(a)] = find(b)
    return len({find(i) for i in parent})


@dataclass
class GngRun:
    graph: GngGraph
    quantization: np.ndarray
    quantization_ema: np.ndarray
    node_counts: np.ndarray


def gng_fit_stream(data: np.ndarray, steps: int, cfg: GngConfig | None = None,
                   rng: np.random.Generator | None = None, ema_decay: float = 0.999) -> GngRun:
    """Feed ``steps`` uniformly drawn rows of ``data`` and record per-step quantization error."""
    cfg = cfg or GngConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    data = np.atleast_2d(np.asarray(data, dtype=float))
    graph = gng_init_from_data(data, rng)
    order = rng.integers(0, data.shape[0], steps)
    q = np.empty(steps)
    ema = np.empty(steps)
    counts = np.empty(steps, dtype=int)
    acc = 0.0
    for t, idx in enumerate(order):
        gng_step(graph, data[idx], cfg)
        q[t] = graph.last_quantization
        acc = q[t] if t == 0 else ema_decay * acc + (1.0 - ema_decay) * q[t]
        ema[t] = acc
        counts[t] = graph.n_nodes
    return GngRun(graph, q, ema, counts)
