"""Disassembly listing ingestion and MinHash/LSH function clustering.

Listing format::

    # comment
    FUNC main
     push
     call helper
    ENDF

Each body line contributes its first token as an opcode; ``call <name>``
also records ``<name>`` as a callee.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .graph import Fcg

MERSENNE_61 = (1 << 61) - 1
DEFAULT_NGRAM = 2
DEFAULT_HASHES = 64
DEFAULT_BANDS = 16
DEFAULT_ROWS = 4
DEFAULT_SEED = 0


class ListingParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class FunctionRecord:
    name: str
    opcodes: list[str] = field(default_factory=list)
    callees: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class MinHashSignature:
    values: tuple[int, ...]

    @property
    def num_hashes(self) -> int:
        return len(self.values)


@dataclass
class BuildDiagnostics:
    unresolved_callees: int = 0


def parse_disassembly(text: str) -> list[FunctionRecord]:
    functions: list[FunctionRecord] = []
    seen: set[str] = set()
    current: FunctionRecord | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "FUNC":
            if current is not None:
                raise ListingParseError(lineno, f"FUNC inside unterminated function {current.name!r}")
            if len(tokens) != 2:
                raise ListingParseError(lineno, "FUNC takes exactly one name")
            name = tokens[1]
            if name in seen:
                raise ListingParseError(lineno, f"duplicate function name {name!r}")
            seen.add(name)
            current = FunctionRecord(name)
        elif head == "ENDF":
            if current is None:
                raise ListingParseError(lineno, "ENDF without matching FUNC")
            functions.append(current)
            current = None
        elif current is None:
            raise ListingParseError(lineno, f"unknown directive {head!r} outside a function")
        else:
            opcode = head.lower()
            current.opcodes.append(opcode)
            if opcode == "call":
                if len(tokens) < 2:
                    raise ListingParseError(lineno, "call without a target")
                current.callees.append(tokens[1])
    if current is not None:
        raise ListingParseError(len(text.splitlines()), f"function {current.name!r} missing ENDF")
    return functions


def opcode_ngrams(fn: FunctionRecord, n: int = DEFAULT_NGRAM) -> Counter:
    """Multiset of contiguous opcode n-grams; short sequences give one padded gram."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ops = fn.opcodes
    if len(ops) < n:
        return Counter([" ".join(ops)])
    return Counter(" ".join(ops[i:i + n]) for i in range(len(ops) - n + 1))


def _hash_coefficients(num_hashes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x6D68]))
    a = rng.integers(1, MERSENNE_61, size=num_hashes, dtype=np.uint64)
    b = rng.integers(0, MERSENNE_61, size=num_hashes, dtype=np.uint64)
    return a, b


def _base_hash(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % MERSENNE_61


def minhash_signature(grams, num_hashes: int = DEFAULT_HASHES, seed: int = DEFAULT_SEED) -> MinHashSignature:
    """MinHash over the distinct grams using ``(a*x + b) mod (2**61 - 1)`` hash functions."""
    if num_hashes <= 0:
        raise ValueError("num_hashes must be positive")
    distinct = sorted(set(grams))
    if not distinct:
        raise ValueError("cannot sign an empty gram set")
    a, b = _hash_coefficients(num_hashes, seed)
    a = [int(x) for x in a]
    b = [int(x) for x in b]
    xs = [_base_hash(g) for g in distinct]
    values = tuple(min((ah * x + bh) % MERSENNE_61 for x in xs) for ah, bh in zip(a, b))
    return MinHashSignature(values)


def lsh_cluster(signatures: list[MinHashSignature], bands: int = DEFAULT_BANDS,
                rows: int = DEFAULT_ROWS) -> list[int]:
    """Cluster ids (first-seen order) from connected components of band collisions."""
    parent = list(range(len(signatures)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for sig in signatures:
        if bands * rows != sig.num_hashes:
            raise ValueError(f"bands*rows = {bands * rows} != num_hashes = {sig.num_hashes}")

    for band in range(bands):
        buckets: dict[tuple[int, ...], int] = {}
        for i, sig in enumerate(signatures):
            key = sig.values[band * rows:(band + 1) * rows]
            j = buckets.setdefault(key, i)
            if j != i:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    ids: dict[int, int] = {}
    out = []
    for i in range(len(signatures)):
        out.append(ids.setdefault(find(i), len(ids)))
    return out


def build_fcg(functions: list[FunctionRecord], clusters: dict[str, int],
              diagnostics: BuildDiagnostics | None = None, label: str | None = None) -> Fcg:
    """Collapse functions to their clusters; call edges become 0/1 cluster edges.

    Vertices are the distinct cluster ids present, laid out in ascending id
    order. Calls to names outside the listing are dropped and counted.
    """
    for fn in functions:
        if fn.name not in clusters:
            raise ValueError(f"function {fn.name!r} has no cluster id")
    present = sorted({clusters[fn.name] for fn in functions})
    index = {cid: i for i, cid in enumerate(present)}
    edges = set()
    unresolved = 0
    for fn in functions:
        for callee in fn.callees:
            if callee not in clusters:
                unresolved += 1
                continue
            edges.add((index[clusters[fn.name]], index[clusters[callee]]))
    if diagnostics is not None:
        diagnostics.unresolved_callees += unresolved
    return Fcg.from_edges(len(present), edges, present, label)


def extract_fcg(text: str, ngram: int = DEFAULT_NGRAM, num_hashes: int = DEFAULT_HASHES,
                bands: int = DEFAULT_BANDS, seed: int = DEFAULT_SEED,
                label: str | None = None) -> tuple[Fcg, BuildDiagnostics]:
    if num_hashes % bands:
        raise ValueError(f"num_hashes {num_hashes} not divisible by bands {bands}")
    functions = parse_disassembly(text)
    sigs = [minhash_signature(opcode_ngrams(fn, ngram), num_hashes, seed) for fn in functions]
    ids = lsh_cluster(sigs, bands, num_hashes // bands)
    clusters = {fn.name: cid for fn, cid in zip(functions, ids)}
    diag = BuildDiagnostics()
    return build_fcg(functions, clusters, diag, label), diag
