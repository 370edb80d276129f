"""Input transformations for the pre-training pretext task.

``fcg_shift`` and ``fcg_random`` reorder vertices and so produce isomorphic
views. ``node_dropping`` and ``subgraph_sampling`` are lossy baselines that
zero the rows and columns of removed vertices in place.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import AdjacencyTensor, permute_adjacency

KINDS = ("identity", "fcg_shift", "fcg_random", "node_dropping", "subgraph_sampling")
DEFAULT_DROP_RATE = 0.2


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "identity"
    shift_n: int | None = None
    drop_rate: float = DEFAULT_DROP_RATE
    walk_len: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        unknown = set(d) - {"kind", "shift_n", "drop_rate", "walk_len", "seed"}
        if unknown:
            raise ValueError(f"unknown TransformSpec fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class TransformOutcome:
    tensor: AdjacencyTensor
    permutation: np.ndarray | None = None


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def _permute_true_vertices(a: AdjacencyTensor, head: np.ndarray) -> TransformOutcome:
    sigma = np.arange(a.size)
    sigma[:len(head)] = head
    return TransformOutcome(permute_adjacency(a, sigma), sigma)


def identity(a: AdjacencyTensor) -> TransformOutcome:
    return TransformOutcome(a.copy(), np.arange(a.size))


def fcg_shift(a: AdjacencyTensor, n: int) -> TransformOutcome:
    """Rotate the vertex order ``n`` places to the left over the true vertices."""
    v = a.true_vertices
    if v == 0:
        return identity(a)
    if not 0 <= n < v:
        raise ValueError(f"shift {n} outside [0, {v})")
    return _permute_true_vertices(a, (np.arange(v) + n) % v)


def fcg_random(a: AdjacencyTensor, seed: int) -> TransformOutcome:
    """Uniformly permute the true vertices."""
    return _permute_true_vertices(a, _rng(seed).permutation(a.true_vertices))


def _zero_vertices(a: AdjacencyTensor, keep: np.ndarray) -> TransformOutcome:
    data = a.data.copy()
    drop = np.flatnonzero(~keep)
    data[drop, :] = 0.0
    data[:, drop] = 0.0
    return TransformOutcome(AdjacencyTensor(data, a.true_vertices))


def node_dropping(a: AdjacencyTensor, drop_rate: float = DEFAULT_DROP_RATE, seed: int = 0) -> TransformOutcome:
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError("drop_rate must lie in [0, 1)")
    keep = _rng(seed).random(a.true_vertices) >= drop_rate
    return _zero_vertices(a, keep)


def subgraph_sampling(a: AdjacencyTensor, walk_len: int | None = None, seed: int = 0) -> TransformOutcome:
    """Keep only the vertices visited by an undirected random walk.

    The walk starts at a uniformly chosen true vertex and takes ``walk_len``
    steps (default ``2 * V``); an isolated vertex keeps the walk in place.
    """
    v = a.true_vertices
    if v == 0:
        raise ValueError("subgraph_sampling needs at least one vertex")
    if walk_len is None:
        walk_len = 2 * v
    if walk_len < 1:
        raise ValueError("walk_len must be >= 1")
    rng = _rng(seed)
    sub = a.data[:v, :v]
    undirected = (sub + sub.T) > 0
    neighbours = [np.flatnonzero(row) for row in undirected]
    pos = int(rng.integers(v))
    visited = np.zeros(v, dtype=bool)
    visited[pos] = True
    for u in rng.random(walk_len):
        nb = neighbours[pos]
        if len(nb):
            pos = int(nb[int(u * len(nb))])
            visited[pos] = True
    return _zero_vertices(a, visited)


def apply_transform(spec: TransformSpec, a: AdjacencyTensor) -> TransformOutcome:
    if spec.kind == "identity":
        return identity(a)
    if spec.kind == "fcg_shift":
        n = spec.shift_n
        if n is None:
            v = a.true_vertices
            n = int(_rng(spec.seed).integers(1, v)) if v > 1 else 0
        return fcg_shift(a, n)
    if spec.kind == "fcg_random":
        return fcg_random(a, spec.seed)
    if spec.kind == "node_dropping":
        return node_dropping(a, spec.drop_rate, spec.seed)
    if spec.kind == "subgraph_sampling":
        return subgraph_sampling(a, spec.walk_len, spec.seed)
    raise ValueError(f"unknown transform kind {spec.kind!r}")
