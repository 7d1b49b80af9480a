"""Text-attributed graphs: loading, validation, queries, and attribute corruption.

A graph bundle on disk is a directory with three files (UTF-8, LF line endings):

    meta.json    {"num_nodes": int, "num_edges": int, "domain_tag": str}
    nodes.jsonl  one object per line: {"id": str, "text": str}
    edges.jsonl  one object per line: {"src": str, "dst": str}

plus an optional ``labels.jsonl`` ({"id": str, "label": str}) used by the
evaluation harness. Graphs are undirected; edge records keep their stored
(src, dst) orientation so downstream protocols can refer to "the first
endpoint" reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Set, Tuple

logger = logging.getLogger(__name__)

NodeId = str

DOMAIN_TAGS = ("citation", "co-purchase", "hyperlink")


class GraphError(Exception):
    """Base class for graph construction and query errors."""


class GraphLoadError(GraphError):
    """A bundle failed validation while loading."""


class UnknownNodeError(GraphError):
    """A query referenced a node id that is not in the graph."""


def _normalize_edge(a: NodeId, b: NodeId) -> Tuple[NodeId, NodeId]:
    return (a, b) if a <= b else (b, a)


class TextGraph:
    """Immutable undirected graph whose nodes carry a text attribute.

    Construction validates structure: edge endpoints must exist, self-loops
    are rejected, and duplicate edges (compared as unordered pairs) are
    dropped with a warning. Empty node text is allowed here so that derived
    graphs (e.g. after heavy word removal) remain representable; the loader
    enforces non-empty text for bundles read from disk.

    Instances are safe to share across threads: all state is fixed at
    construction time.
    """

    __slots__ = ("_texts", "_order", "_adjacency", "_edge_records", "_edge_set",
                 "_domain_tag", "_fingerprint")

    def __init__(
        self,
        nodes: Sequence[Tuple[NodeId, str]],
        edges: Iterable[Tuple[NodeId, NodeId]],
        domain_tag: str,
    ) -> None:
        if domain_tag not in DOMAIN_TAGS:
            raise GraphError(f"unknown domain_tag {domain_tag!r}; expected one of {DOMAIN_TAGS}")
        texts: Dict[NodeId, str] = {}
        order: List[NodeId] = []
        for node_id, text in nodes:
            if not node_id:
                raise GraphError("node id must be a non-empty string")
            if node_id in texts:
                raise GraphError(f"duplicate node id {node_id!r}")
            texts[node_id] = text
            order.append(node_id)

        adjacency: Dict[NodeId, Set[NodeId]] = {v: set() for v in order}
        edge_records: List[Tuple[NodeId, NodeId]] = []
        edge_set: Set[Tuple[NodeId, NodeId]] = set()
        duplicates = 0
        for src, dst in edges:
            if src not in texts or dst not in texts:
                missing = src if src not in texts else dst
                raise GraphError(f"dangling endpoint: edge ({src!r}, {dst!r}) references unknown node {missing!r}")
            if src == dst:
                raise GraphError(f"self-loop on node {src!r} is not allowed")
            key = _normalize_edge(src, dst)
            if key in edge_set:
                duplicates += 1
                continue
            edge_set.add(key)
            edge_records.append((src, dst))
            adjacency[src].add(dst)
            adjacency[dst].add(src)
        if duplicates:
            logger.warning("dropped %d duplicate edge(s)", duplicates)

        self._texts = texts
        self._order = tuple(order)
        self._adjacency = {v: frozenset(nbrs) for v, nbrs in adjacency.items()}
        self._edge_records = tuple(edge_records)
        self._edge_set = frozenset(edge_set)
        self._domain_tag = domain_tag
        self._fingerprint: str | None = None

    @property
    def domain_tag(self) -> str:
        return self._domain_tag

    @property
    def nodes(self) -> Tuple[NodeId, ...]:
        """Node ids in insertion order."""
        return self._order

    @property
    def edge_records(self) -> Tuple[Tuple[NodeId, NodeId], ...]:
        """Edges in stored order, keeping their (src, dst) orientation."""
        return self._edge_records

    @property
    def edge_set(self) -> frozenset:
        """Edges as normalized unordered pairs."""
        return self._edge_set

    @property
    def num_nodes(self) -> int:
        return len(self._order)

    @property
    def num_edges(self) -> int:
        return len(self._edge_set)

    def __contains__(self, node_id: NodeId) -> bool:
        return node_id in self._texts

    def _require(self, node_id: NodeId) -> None:
        if node_id not in self._texts:
            raise UnknownNodeError(f"unknown node id {node_id!r}")

    def text(self, node_id: NodeId) -> str:
        self._require(node_id)
        return self._texts[node_id]

    def neighbors(self, node_id: NodeId) -> frozenset:
        """All nodes sharing an edge with ``node_id``; never contains the node itself."""
        self._require(node_id)
        return self._adjacency[node_id]

    def degree(self, node_id: NodeId) -> int:
        return len(self.neighbors(node_id))

    def has_edge(self, a: NodeId, b: NodeId) -> bool:
        return _normalize_edge(a, b) in self._edge_set

    def fingerprint(self) -> str:
        """Stable content digest over domain, node texts and the edge set.

        Used to key cached representations so that two structurally different
        graphs (e.g. before/after edge removal) can never collide in a cache.
        """
        if self._fingerprint is None:
            h = hashlib.sha256()
            h.update(self._domain_tag.encode("utf-8"))
            for node_id in sorted(self._order):
                h.update(b"\x00n")
                h.update(node_id.encode("utf-8"))
                h.update(b"\x00t")
                h.update(self._texts[node_id].encode("utf-8"))
            for a, b in sorted(self._edge_set):
                h.update(b"\x00e")
                h.update(a.encode("utf-8"))
                h.update(b"\x00")
                h.update(b.encode("utf-8"))
            self._fingerprint = h.hexdigest()[:16]
        return self._fingerprint

    def with_texts(self, texts: Mapping[NodeId, str]) -> "TextGraph":
        """New graph with identical topology and replaced node texts."""
        nodes = [(v, texts.get(v, self._texts[v])) for v in self._order]
        return TextGraph(nodes, self._edge_records, self._domain_tag)

    def without_edges(self, removed: Iterable[Tuple[NodeId, NodeId]]) -> "TextGraph":
        """New graph with the given edges (unordered comparison) removed."""
        gone = {_normalize_edge(a, b) for a, b in removed}
        kept = [e for e in self._edge_records if _normalize_edge(*e) not in gone]
        return TextGraph([(v, self._texts[v]) for v in self._order], kept, self._domain_tag)


def load_graph(path: str | Path, domain_tag: str | None = None) -> TextGraph:
    """Load and validate a graph bundle directory.

    The declared counts in ``meta.json`` must match the loaded graph exactly
    (duplicate edge lines are tolerated and dropped with a warning, but the
    declared edge count refers to unique edges). Every node must carry
    non-empty text.
    """
    root = Path(path)
    meta_path = root / "meta.json"
    nodes_path = root / "nodes.jsonl"
    edges_path = root / "edges.jsonl"
    for p in (meta_path, nodes_path, edges_path):
        if not p.is_file():
            raise GraphLoadError(f"missing bundle file: {p}")

    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphLoadError(f"malformed meta.json: {exc}") from exc

    declared_tag = meta.get("domain_tag")
    if domain_tag is None:
        domain_tag = declared_tag
    elif declared_tag is not None and declared_tag != domain_tag:
        raise GraphLoadError(
            f"domain tag mismatch: bundle declares {declared_tag!r}, caller asked for {domain_tag!r}"
        )
    if domain_tag is None:
        raise GraphLoadError("no domain_tag in meta.json and none supplied")

    nodes: List[Tuple[NodeId, str]] = []
    for lineno, record in _read_jsonl(nodes_path):
        node_id = record.get("id")
        text = record.get("text")
        if not isinstance(node_id, str) or not isinstance(text, str):
            raise GraphLoadError(f"{nodes_path}:{lineno}: node record needs string 'id' and 'text'")
        if not text:
            raise GraphLoadError(f"{nodes_path}:{lineno}: node {node_id!r} has empty attribute text")
        nodes.append((node_id, text))

    edges: List[Tuple[NodeId, NodeId]] = []
    for lineno, record in _read_jsonl(edges_path):
        src, dst = record.get("src"), record.get("dst")
        if not isinstance(src, str) or not isinstance(dst, str):
            raise GraphLoadError(f"{edges_path}:{lineno}: edge record needs string 'src' and 'dst'")
        edges.append((src, dst))

    try:
        graph = TextGraph(nodes, edges, domain_tag)
    except GraphError as exc:
        raise GraphLoadError(str(exc)) from exc

    declared_nodes = meta.get("num_nodes")
    declared_edges = meta.get("num_edges")
    if declared_nodes is not None and declared_nodes != graph.num_nodes:
        raise GraphLoadError(
            f"declared-count mismatch: meta.json says {declared_nodes} nodes, bundle has {graph.num_nodes}"
        )
    if declared_edges is not None and declared_edges != graph.num_edges:
        raise GraphLoadError(
            f"declared-count mismatch: meta.json says {declared_edges} edges, bundle has {graph.num_edges}"
        )
    return graph


def _read_jsonl(path: Path):
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphLoadError(f"{path}:{lineno}: malformed record: {exc}") from exc


def save_graph(graph: TextGraph, path: str | Path) -> None:
    """Write a graph back out as a bundle directory (round-trips with load_graph)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": graph.num_nodes, "num_edges": graph.num_edges, "domain_tag": graph.domain_tag}
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    with (root / "nodes.jsonl").open("w", encoding="utf-8") as fh:
        for node_id in graph.nodes:
            fh.write(json.dumps({"id": node_id, "text": graph.text(node_id)}, ensure_ascii=False) + "\n")
    with (root / "edges.jsonl").open("w", encoding="utf-8") as fh:
        for src, dst in graph.edge_records:
            fh.write(json.dumps({"src": src, "dst": dst}, ensure_ascii=False) + "\n")


def load_labels(path: str | Path) -> Dict[NodeId, str]:
    """Read the optional labels.jsonl of a bundle into an id -> label map."""
    labels_path = Path(path) / "labels.jsonl"
    if not labels_path.is_file():
        raise GraphLoadError(f"missing bundle file: {labels_path}")
    labels: Dict[NodeId, str] = {}
    for lineno, record in _read_jsonl(labels_path):
        node_id, label = record.get("id"), record.get("label")
        if not isinstance(node_id, str) or not isinstance(label, str):
            raise GraphLoadError(f"{labels_path}:{lineno}: label record needs string 'id' and 'label'")
        labels[node_id] = label
    return labels


def save_labels(labels: Mapping[NodeId, str], path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "labels.jsonl").open("w", encoding="utf-8") as fh:
        for node_id, label in labels.items():
            fh.write(json.dumps({"id": node_id, "label": label}, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class CorruptionReport:
    """What attribute corruption removed, per node."""

    removed_words: Mapping[NodeId, int]
    emptied_nodes: Tuple[NodeId, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class CorruptionResult:
    graph: TextGraph
    report: CorruptionReport


def corrupt_attributes(graph: TextGraph, removal_ratio: float, seed: int) -> CorruptionResult:
    """Remove a fixed fraction of words from every node's attribute text.

    For a node with ``w`` whitespace-delimited words, exactly
    ``floor(removal_ratio * w)`` words are removed, chosen uniformly at
    random under ``seed``; surviving words keep their original order.
    Topology is untouched. The result is a pure function of
    (graph, ratio, seed). Nodes whose text ends up empty are flagged in the
    report rather than rejected.
    """
    from .sampling import derive_stream  # local import to avoid a module cycle

    if not 0.0 <= removal_ratio <= 1.0:
        raise ValueError(f"removal_ratio must be in [0, 1], got {removal_ratio}")

    new_texts: Dict[NodeId, str] = {}
    removed: Dict[NodeId, int] = {}
    emptied: List[NodeId] = []
    for node_id in graph.nodes:
        text = graph.text(node_id)
        words = text.split()
        n_remove = int(removal_ratio * len(words))
        if n_remove == 0:
            # Identity case stays byte-identical (no whitespace normalization).
            new_texts[node_id] = text
            removed[node_id] = 0
            continue
        stream = derive_stream(seed, "corrupt_attr", node_id)
        drop = set(stream.sample_indices(len(words), n_remove))
        kept = [w for i, w in enumerate(words) if i not in drop]
        new_texts[node_id] = " ".join(kept)
        removed[node_id] = n_remove
        if not kept:
            emptied.append(node_id)

    corrupted = graph.with_texts(new_texts)
    report = CorruptionReport(removed_words=removed, emptied_nodes=tuple(emptied))
    return CorruptionResult(graph=corrupted, report=report)
