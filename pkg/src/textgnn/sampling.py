"""Seeded random selection over text graphs.

Every operation here is a pure function of (graph, arguments, seed). Each
call derives its own generator stream from the seed, an operation tag, and
the salient arguments, so concurrent calls share no state and the same call
reproduces bit-for-bit on any platform.

The generator is SplitMix64, a fixed 64-bit algorithm implemented inline so
that sampled ids do not depend on interpreter or library versions. Selection
without replacement is a partial Fisher-Yates over a canonically ordered
population (lexicographic node order).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .graph import NodeId, TextGraph

_MASK64 = (1 << 64) - 1

SAMPLE_SCOPES = ("one_hop", "two_hop", "task_nodes", "task_edges", "negatives", "corrupted_neighborhood")


class SamplingError(Exception):
    """A sampling precondition was violated (population too small, bad k)."""


@dataclass(frozen=True)
class SampleSpec:
    """One seeded selection request: what to draw, how many, under which seed."""

    seed: int
    k: int
    scope: str

    def __post_init__(self) -> None:
        if self.k < 1:
            raise SamplingError(f"sample size k must be >= 1, got {self.k}")
        if self.scope not in SAMPLE_SCOPES:
            raise SamplingError(f"unknown scope {self.scope!r}")


class SplitMix64:
    """SplitMix64 PRNG: 64-bit state, 64-bit output, trivially portable."""

    __slots__ = ("_state",)

    def __init__(self, seed: int) -> None:
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection, so no modulo bias."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = ((1 << 64) // n) * n
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def sample(self, population: Sequence, k: int) -> list:
        """k distinct elements, uniform without replacement, in draw order."""
        if k > len(population):
            raise SamplingError(f"cannot draw {k} from population of {len(population)}")
        pool = list(population)
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def sample_indices(self, n: int, k: int) -> list:
        return self.sample(range(n), k)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_stream(seed: int, *tags: object) -> SplitMix64:
    """Independent SplitMix64 stream for (seed, operation tag, arguments)."""
    material = "|".join([str(seed)] + [str(t) for t in tags])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return SplitMix64(int.from_bytes(digest[:8], "little"))


def sample_neighbors(graph: TextGraph, node: NodeId, k: int, seed: int) -> List[NodeId]:
    """Up to k distinct neighbors of ``node``, uniform without replacement.

    Returns all neighbors when the degree is below k. Output order is the
    draw order and is part of the contract (prompts list neighbors in it).
    """
    if k < 1:
        raise SamplingError(f"k must be >= 1, got {k}")
    neighbors = sorted(graph.neighbors(node))
    take = min(k, len(neighbors))
    if take == 0:
        return []
    stream = derive_stream(seed, "neighbors", node)
    return stream.sample(neighbors, take)


def sample_two_hop(
    graph: TextGraph, node: NodeId, k1: int, k2: int, seed: int
) -> Tuple[List[NodeId], List[NodeId]]:
    """One-hop sample plus a sample of nodes at shortest-path distance exactly 2.

    The one-hop list is ``sample_neighbors(graph, node, k1, seed)``. Two-hop
    candidates are neighbors-of-neighbors excluding the node itself and its
    direct neighbors, which is precisely the distance-2 set. The two lists
    are therefore disjoint by construction.
    """
    if k2 < 1:
        raise SamplingError(f"k2 must be >= 1, got {k2}")
    one_hop = sample_neighbors(graph, node, k1, seed)
    direct = graph.neighbors(node)
    two_hop_set = set()
    for mid in direct:
        two_hop_set.update(graph.neighbors(mid))
    two_hop_set.discard(node)
    two_hop_set -= direct
    candidates = sorted(two_hop_set)
    take = min(k2, len(candidates))
    if take == 0:
        return one_hop, []
    stream = derive_stream(seed, "two_hop", node)
    return one_hop, stream.sample(candidates, take)


def corrupt_neighborhood(
    graph: TextGraph, node: NodeId, true_k: int, noise_k: int, seed: int
) -> List[NodeId]:
    """true_k genuine neighbors plus noise_k non-adjacent nodes, shuffled together.

    The genuine part is exactly ``sample_neighbors(graph, node, true_k, seed)``
    so that noise_k=0 degenerates to plain neighbor sampling. Noise nodes are
    drawn uniformly from the rest of the graph (never the node itself or any
    true neighbor).
    """
    if noise_k < 0:
        raise SamplingError(f"noise_k must be >= 0, got {noise_k}")
    if graph.degree(node) < true_k:
        raise SamplingError(
            f"insufficient degree: node {node!r} has degree {graph.degree(node)}, need {true_k}"
        )
    true_part = sample_neighbors(graph, node, true_k, seed)
    if noise_k == 0:
        return true_part
    excluded = set(graph.neighbors(node))
    excluded.add(node)
    pool = sorted(v for v in graph.nodes if v not in excluded)
    if len(pool) < noise_k:
        raise SamplingError(
            f"graph too small: only {len(pool)} non-adjacent candidates, need {noise_k}"
        )
    noise_part = derive_stream(seed, "corrupt_noise", node).sample(pool, noise_k)
    combined = true_part + noise_part
    derive_stream(seed, "corrupt_shuffle", node).shuffle(combined)
    return combined


def sample_task_nodes(graph: TextGraph, n: int, min_degree: int, seed: int) -> List[NodeId]:
    """n distinct nodes with degree >= min_degree, uniform under seed."""
    if n < 1:
        raise SamplingError(f"n must be >= 1, got {n}")
    eligible = sorted(v for v in graph.nodes if graph.degree(v) >= min_degree)
    if len(eligible) < n:
        raise SamplingError(
            f"insufficient eligible nodes: {len(eligible)} with degree >= {min_degree}, need {n}"
        )
    return derive_stream(seed, "task_nodes").sample(eligible, n)


def sample_task_edges(
    graph: TextGraph, n: int, min_degree: int, seed: int
) -> List[Tuple[NodeId, NodeId]]:
    """n distinct edges whose endpoints BOTH have degree strictly above min_degree.

    The strict inequality (versus the >= filter used for task nodes) is part
    of the protocol contract. Returned pairs keep their stored orientation.
    """
    if n < 1:
        raise SamplingError(f"n must be >= 1, got {n}")
    eligible = [
        (src, dst)
        for src, dst in graph.edge_records
        if graph.degree(src) > min_degree and graph.degree(dst) > min_degree
    ]
    eligible.sort()
    if len(eligible) < n:
        raise SamplingError(
            f"insufficient eligible edges: {len(eligible)} with endpoint degree > {min_degree}, need {n}"
        )
    return derive_stream(seed, "task_edges").sample(eligible, n)


def sample_negatives(
    graph: TextGraph, anchor: NodeId, true_node: NodeId, m: int, seed: int
) -> List[NodeId]:
    """m distinct nodes that are neither endpoint nor adjacent to the anchor."""
    if m < 1:
        raise SamplingError(f"m must be >= 1, got {m}")
    excluded = set(graph.neighbors(anchor))
    excluded.add(anchor)
    excluded.add(true_node)
    pool = sorted(v for v in graph.nodes if v not in excluded)
    if len(pool) < m:
        raise SamplingError(
            f"graph too small to supply {m} valid negatives for anchor {anchor!r} "
            f"(only {len(pool)} candidates)"
        )
    return derive_stream(seed, "negatives", anchor, true_node).sample(pool, m)


def write_sample_manifest(path: str | Path, kind: str, seed: int, items: Sequence) -> None:
    """Persist a sampling outcome so a run can be re-scored without re-sampling."""
    record = {"kind": kind, "seed": seed, "items": [list(i) if isinstance(i, tuple) else i for i in items]}
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_sample_manifests(path: str | Path) -> List[Dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
