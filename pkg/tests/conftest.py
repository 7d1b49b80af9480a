"""Shared fixtures: small graphs, bundle writers, and scripted backends."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import pytest

from textgnn.gateway import CompletionRequest, CompletionResponse
from textgnn.graph import TextGraph


def pytest_runtest_logreport(report):
    # One visible pass/fail line per acceptance criterion. Condition-based
    # skips (e.g. the live smoke without credentials) surface at setup.
    if "test_acceptance" not in report.nodeid:
        return
    emit = report.when == "call" or (report.when == "setup" and report.skipped)
    if emit:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        print(f"\n[ACCEPTANCE] {name}: {outcome}")


def make_graph(
    edges: Iterable[Tuple[str, str]],
    texts: Dict[str, str] | None = None,
    extra_nodes: Sequence[str] = (),
    domain_tag: str = "citation",
) -> TextGraph:
    """Graph from an edge list; node texts default to a sentence per node."""
    texts = dict(texts or {})
    node_ids: List[str] = []
    seen = set()
    for a, b in edges:
        for v in (a, b):
            if v not in seen:
                seen.add(v)
                node_ids.append(v)
    for v in extra_nodes:
        if v not in seen:
            seen.add(v)
            node_ids.append(v)
    nodes = [(v, texts.get(v, f"Description of node {v}. It covers topic {v}.")) for v in node_ids]
    return TextGraph(nodes, edges, domain_tag)


def ring_graph(n: int, width: int = 2, domain_tag: str = "citation") -> TextGraph:
    """Circulant graph: node i links to the next `width` nodes; degree 2*width."""
    names = [f"n{i:04d}" for i in range(n)]
    edges = [(names[i], names[(i + d) % n]) for i in range(n) for d in range(1, width + 1)]
    nodes = [(v, f"Description of {v}. Topic {i % 7}.") for i, v in enumerate(names)]
    return TextGraph(nodes, edges, domain_tag)


def write_bundle(root: Path, graph: TextGraph, labels: Dict[str, str] | None = None) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": graph.num_nodes, "num_edges": graph.num_edges, "domain_tag": graph.domain_tag}
    (root / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    with (root / "nodes.jsonl").open("w", encoding="utf-8") as fh:
        for v in graph.nodes:
            fh.write(json.dumps({"id": v, "text": graph.text(v)}) + "\n")
    with (root / "edges.jsonl").open("w", encoding="utf-8") as fh:
        for src, dst in graph.edge_records:
            fh.write(json.dumps({"src": src, "dst": dst}) + "\n")
    if labels is not None:
        with (root / "labels.jsonl").open("w", encoding="utf-8") as fh:
            for v, label in labels.items():
                fh.write(json.dumps({"id": v, "label": label}) + "\n")
    return root


class ScriptedBackend:
    """Backend returning canned texts; either a fixed one or per-call sequence."""

    supports_source_markers = False

    def __init__(self, texts: str | Sequence[str], model_id: str = "scripted") -> None:
        self._texts = [texts] if isinstance(texts, str) else list(texts)
        self._calls = 0
        self.model_id = model_id
        self.requests: List[CompletionRequest] = []

    def send(self, req: CompletionRequest) -> CompletionResponse:
        self.requests.append(req)
        text = self._texts[self._calls % len(self._texts)]
        self._calls += 1
        return CompletionResponse(
            text=text,
            prompt_tokens=len(req.instruction_text.split()) + len(req.content_text.split()),
            completion_tokens=len(text.split()),
            model_id=self.model_id,
        )


class FlakyBackend:
    """Fails with the given exceptions first, then answers like the inner backend."""

    supports_source_markers = False

    def __init__(self, failures: Sequence[Exception], inner) -> None:
        self._failures = list(failures)
        self._inner = inner
        self.model_id = inner.model_id

    def send(self, req: CompletionRequest) -> CompletionResponse:
        if self._failures:
            raise self._failures.pop(0)
        return self._inner.send(req)


@pytest.fixture
def path_graph() -> TextGraph:
    """a - b - c path with distinct texts."""
    return make_graph(
        [("a", "b"), ("b", "c")],
        texts={
            "a": "Alpha studies attention mechanisms. It is the target work.",
            "b": "Beta studies translation systems. It cites alpha.",
            "c": "Gamma studies vision transformers. It cites beta.",
        },
    )
