"""Synthetic labelled FCG corpora with many small, sparse components.

Every class owns a library of small template digraphs whose vertices carry
preferred cluster ids. A sample is the disjoint union of several templates
from its class library; label noise then resamples individual cluster ids
from the global vocabulary. Vertices that end up sharing a cluster id are
merged, as function clustering would do, and vertices are laid out in
ascending cluster-id order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import Fcg


@dataclass
class SynthConfig:
    num_classes: int = 9
    samples_per_class: int = 80
    vocabulary: int = 60
    size: int = 67
    templates_per_class: int = 18
    template_size: tuple[int, int] = (2, 4)
    extra_edges: tuple[int, int] = (1, 3)
    components: tuple[int, int] = (12, 18)
    # chance that a class template is borrowed from a pool shared by all classes
    shared_fraction: float = 0.3
    label_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.template_size = tuple(self.template_size)
        self.extra_edges = tuple(self.extra_edges)
        self.components = tuple(self.components)
        for name in ("label_noise", "shared_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.template_size
        if not 1 <= lo <= hi:
            raise ValueError("template_size must satisfy 1 <= min <= max")
        if hi > self.size:
            raise ValueError(f"templates of {hi} vertices do not fit size {self.size}")
        if self.vocabulary > self.size:
            raise ValueError(f"vocabulary {self.vocabulary} exceeds tensor size {self.size}")
        if not 1 <= self.components[0] <= self.components[1] <= self.templates_per_class:
            raise ValueError("components range must lie within [1, templates_per_class]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("template_size", "extra_edges", "components"):
            d[k] = list(d[k])
        return d


@dataclass
class Template:
    size: int
    edges: list[tuple[int, int]]
    ids: list[int]


def _random_template(rng: np.random.Generator, cfg: SynthConfig, ids: list[int]) -> Template:
    n = len(ids)
    edges = set()
    # random tree for connectivity, edge directions random
    for v in range(1, n):
        u = int(rng.integers(v))
        edges.add((u, v) if rng.random() < 0.5 else (v, u))
    for _ in range(int(rng.integers(cfg.extra_edges[0], cfg.extra_edges[1] + 1))):
        edges.add((int(rng.integers(n)), int(rng.integers(n))))
    return Template(n, sorted(edges), ids)


def _draw_ids(rng: np.random.Generator, cfg: SynthConfig, count: int) -> list[list[int]]:
    """Partition a random run of the vocabulary into ``count`` id blocks."""
    lo, hi = cfg.template_size
    sizes = rng.integers(lo, hi + 1, size=count)
    perm = rng.permutation(cfg.vocabulary)
    out, pos = [], 0
    for s in sizes:
        block = [int(perm[(pos + j) % cfg.vocabulary]) for j in range(int(s))]
        out.append(block)
        pos += int(s)
    return out


def class_libraries(cfg: SynthConfig) -> list[list[Template]]:
    """Per-class template libraries.

    Shared templates contribute only their edge structure; every class lays
    its templates over its own permutation of the vocabulary so that ids do
    not collide within a class.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5E7]))
    shared = [_random_template(rng, cfg, ids) for ids in _draw_ids(rng, cfg, cfg.templates_per_class)]
    libs = []
    for _ in range(cfg.num_classes):
        lib = []
        for i, ids in enumerate(_draw_ids(rng, cfg, cfg.templates_per_class)):
            if rng.random() < cfg.shared_fraction and len(shared[i].ids) == len(ids):
                lib.append(Template(len(ids), shared[i].edges, ids))
            else:
                lib.append(_random_template(rng, cfg, ids))
        libs.append(lib)
    return libs


def _sample(rng: np.random.Generator, cfg: SynthConfig, lib: list[Template], label: str) -> Fcg:
    k = int(rng.integers(cfg.components[0], cfg.components[1] + 1))
    chosen = sorted(rng.choice(len(lib), size=k, replace=False).tolist())
    edges = set()
    present = set()
    for t in chosen:
        tpl = lib[t]
        ids = [int(rng.integers(cfg.vocabulary)) if rng.random() < cfg.label_noise else c
               for c in tpl.ids]
        present.update(ids)
        edges.update((ids[u], ids[v]) for u, v in tpl.edges)
    order = sorted(present)
    index = {c: i for i, c in enumerate(order)}
    return Fcg.from_edges(len(order), ((index[u], index[v]) for u, v in edges), order, label)


def synth_corpus(cfg: SynthConfig) -> list[Fcg]:
    libs = class_libraries(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0]))
    corpus = []
    for c, lib in enumerate(libs):
        for _ in range(cfg.samples_per_class):
            corpus.append(_sample(rng, cfg, lib, str(c)))
    return corpus
