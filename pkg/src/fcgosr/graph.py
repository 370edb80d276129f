"""Function call graph data model, padded adjacency tensors and corpus statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_SIZE = 67


class CapacityError(ValueError):
    """Raised when a graph has more vertices than the padded tensor can hold."""

    def __init__(self, num_vertices: int, size: int):
        super().__init__(f"graph has {num_vertices} vertices but tensor size is {size}")
        self.num_vertices = num_vertices
        self.size = size


@dataclass(frozen=True)
class Fcg:
    """Directed graph whose vertices are function clusters.

    ``cluster_ids[i]`` is the label of vertex ``i``; ``edges`` holds ordered
    (caller, callee) vertex index pairs. Self-loops are allowed.
    """

    num_vertices: int
    cluster_ids: tuple[int, ...]
    edges: frozenset[tuple[int, int]]
    label: str | None = None

    def __post_init__(self):
        if self.num_vertices < 0:
            raise ValueError("num_vertices must be >= 0")
        if len(self.cluster_ids) != self.num_vertices:
            raise ValueError(
                f"expected {self.num_vertices} cluster ids, got {len(self.cluster_ids)}"
            )
        if any(c < 0 for c in self.cluster_ids):
            raise ValueError("cluster ids must be non-negative")
        for u, v in self.edges:
            if not (0 <= u < self.num_vertices and 0 <= v < self.num_vertices):
                raise ValueError(f"edge ({u}, {v}) out of range for {self.num_vertices} vertices")

    @classmethod
    def from_edges(cls, num_vertices: int, edges: Iterable[Sequence[int]],
                   cluster_ids: Sequence[int] | None = None, label: str | None = None) -> "Fcg":
        if cluster_ids is None:
            cluster_ids = range(num_vertices)
        return cls(
            num_vertices=int(num_vertices),
            cluster_ids=tuple(int(c) for c in cluster_ids),
            edges=frozenset((int(u), int(v)) for u, v in edges),
            label=label,
        )

    def to_dict(self) -> dict:
        d = {
            "num_vertices": self.num_vertices,
            "cluster_ids": list(self.cluster_ids),
            "edges": [list(e) for e in sorted(self.edges)],
        }
        if self.label is not None:
            d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Fcg":
        return cls.from_edges(d["num_vertices"], d.get("edges", []),
                              d.get("cluster_ids"), d.get("label"))


@dataclass
class AdjacencyTensor:
    """Zero-padded ``size x size`` adjacency matrix of a graph with ``true_vertices`` vertices."""

    data: np.ndarray
    true_vertices: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"adjacency data must be square, got shape {self.data.shape}")
        if not 0 <= self.true_vertices <= self.data.shape[0]:
            raise ValueError("true_vertices must lie in [0, size]")

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "AdjacencyTensor":
        return AdjacencyTensor(self.data.copy(), self.true_vertices)

    def __eq__(self, other):
        if not isinstance(other, AdjacencyTensor):
            return NotImplemented
        return (self.true_vertices == other.true_vertices
                and np.array_equal(self.data, other.data))


@dataclass
class GraphStatsReport:
    mean_vertices: float
    mean_degree: float
    degree_per_vertex_pct: float
    mean_components: float
    mean_component_size: float
    component_size_per_vertex_pct: float
    num_graphs: int = field(default=0)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def undirected_degrees(g: Fcg) -> np.ndarray:
    # each directed edge adds one to both endpoints, so a self-loop adds two
    deg = np.zeros(g.num_vertices, dtype=np.int64)
    for u, v in g.edges:
        deg[u] += 1
        deg[v] += 1
    return deg


def degree_sequence(g: Fcg) -> list[int]:
    return sorted(int(d) for d in undirected_degrees(g))


def to_adjacency(g: Fcg, size: int = DEFAULT_SIZE, mode: str = "strict") -> AdjacencyTensor:
    """Build the padded 0/1 adjacency tensor of ``g``.

    ``strict`` refuses graphs larger than ``size``. ``truncate`` keeps the
    ``size`` vertices of highest undirected degree (ties go to the lower
    index) and lays them out in their original relative order.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if mode not in ("strict", "truncate"):
        raise ValueError(f"unknown adjacency mode {mode!r}")
    data = np.zeros((size, size), dtype=np.float64)
    if g.num_vertices <= size:
        for u, v in g.edges:
            data[u, v] = 1.0
        return AdjacencyTensor(data, g.num_vertices)
    if mode == "strict":
        raise CapacityError(g.num_vertices, size)

    deg = undirected_degrees(g)
    order = sorted(range(g.num_vertices), key=lambda i: (-deg[i], i))
    kept = sorted(order[:size])
    remap = {old: new for new, old in enumerate(kept)}
    for u, v in g.edges:
        if u in remap and v in remap:
            data[remap[u], remap[v]] = 1.0
    return AdjacencyTensor(data, size)


def weak_components(g: Fcg) -> list[set[int]]:
    """Weakly connected components, ordered by their smallest vertex."""
    parent = list(range(g.num_vertices))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in g.edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)

    groups: dict[int, set[int]] = {}
    for v in range(g.num_vertices):
        groups.setdefault(find(v), set()).add(v)
    return sorted(groups.values(), key=min)


def component_sizes(g: Fcg) -> list[int]:
    return sorted(len(c) for c in weak_components(g))


def graph_stats(corpus: Sequence[Fcg]) -> GraphStatsReport:
    """Corpus averages of vertex count, degree, and component structure.

    Ratios are averages of per-graph ratios; graphs without vertices only
    contribute to ``mean_vertices``.
    """
    if len(corpus) == 0:
        raise ValueError("graph_stats needs a non-empty corpus")
    verts, degs, deg_pct, comps, comp_size, comp_pct = [], [], [], [], [], []
    for g in corpus:
        verts.append(g.num_vertices)
        if g.num_vertices == 0:
            continue
        v = g.num_vertices
        mean_deg = float(undirected_degrees(g).mean())
        sizes = component_sizes(g)
        mean_size = v / len(sizes)
        degs.append(mean_deg)
        deg_pct.append(100.0 * mean_deg / v)
        comps.append(len(sizes))
        comp_size.append(mean_size)
        comp_pct.append(100.0 * mean_size / v)

    def avg(xs):
        return float(np.mean(xs)) if xs else 0.0

    return GraphStatsReport(
        mean_vertices=avg(verts),
        mean_degree=avg(degs),
        degree_per_vertex_pct=avg(deg_pct),
        mean_components=avg(comps),
        mean_component_size=avg(comp_size),
        component_size_per_vertex_pct=avg(comp_pct),
        num_graphs=len(corpus),
    )


def permute_adjacency(a: AdjacencyTensor, sigma: Sequence[int]) -> AdjacencyTensor:
    """Return ``b`` with ``b[i][j] = a[sigma[i]][sigma[j]]``."""
    sigma = np.asarray(sigma, dtype=np.int64)
    return AdjacencyTensor(a.data[np.ix_(sigma, sigma)], a.true_vertices)


def check_isomorphic_under(a: AdjacencyTensor, b: AdjacencyTensor, sigma: Sequence[int]) -> bool:
    if not (a.size == b.size == len(sigma)):
        raise ValueError(f"size mismatch: a={a.size}, b={b.size}, sigma={len(sigma)}")
    sigma = np.asarray(sigma, dtype=np.int64)
    if sorted(sigma.tolist()) != list(range(len(sigma))):
        raise ValueError("sigma is not a permutation")
    return bool(np.array_equal(b.data, a.data[np.ix_(sigma, sigma)]))


def adjacency_to_fcg(a: AdjacencyTensor, threshold: float = 0.5) -> Fcg:
    """Read a tensor back into an Fcg over its ``true_vertices`` leading indices."""
    v = a.true_vertices
    rows, cols = np.nonzero(a.data[:v, :v] > threshold)
    return Fcg.from_edges(v, zip(rows.tolist(), cols.tolist()))


def read_corpus(path) -> list[Fcg]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Fcg.from_dict(json.loads(line)))
    return out


def write_corpus(corpus: Iterable[Fcg], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in corpus:
            fh.write(json.dumps(g.to_dict(), sort_keys=True) + "\n")
