"""Zero-shot downstream protocols: node classification and link prediction.

Both tasks share one loop: encode the needed nodes, render each target's
composite representation, ask the task backend, and score the parsed answer
under the strict one-line contract (one format-reminder retry, then the item
counts as incorrect). Task responses are cached next to representations, so
a repeated run replays byte-identically with zero backend calls.

Link prediction follows the edge-removal protocol: the sampled edges are
deleted from the working graph before any encoding happens, so no
representation can leak the answer.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .cache import CacheEntry, RepresentationCache
from .config import EncoderConfig
from .encoder import corruption_key_extras, encode, encode_corrupted, encoding_key, plan_receptive_field
from .gateway import CompletionRequest, Gateway, as_gateway
from .graph import NodeId, TextGraph
from .prompts import (
    LINK_CANDIDATE_COUNT,
    TEMPLATE_PACK_VERSION,
    PromptBundle,
    build_link_prediction_prompt,
    build_node_classification_prompt,
    render_final_representation,
)
from .sampling import (
    corrupt_neighborhood,
    derive_stream,
    sample_negatives,
    sample_task_edges,
    sample_task_nodes,
)

_ANSWER_RE = re.compile(r"ANSWER:\s*(.+)", re.IGNORECASE)

FORMAT_REMINDER = (
    "Reminder: respond with exactly one line in the form ANSWER: <choice>, "
    "where <choice> is exactly one of the listed options."
)

LINK_CHOICES = tuple(str(i) for i in range(LINK_CANDIDATE_COUNT))


class AnswerParseError(Exception):
    """The response did not contain exactly one valid ANSWER line."""


def parse_answer(text: str, valid_choices: Sequence[str]) -> str:
    """Extract the ANSWER line and resolve it against the valid choices."""
    found: List[str] = []
    for line in text.splitlines():
        m = _ANSWER_RE.search(line)
        if m:
            found.append(m.group(1).strip())
    if not found:
        raise AnswerParseError("no ANSWER line in response")
    by_lower = {c.strip().lower(): c for c in valid_choices}
    hits: List[str] = []
    for raw in found:
        cleaned = raw.strip().rstrip(".").strip()
        choice = by_lower.get(cleaned.lower())
        if choice is not None and choice not in hits:
            hits.append(choice)
    if not hits:
        raise AnswerParseError(f"no valid choice among {found!r}")
    if len(hits) > 1:
        raise AnswerParseError(f"multiple choices matched: {hits!r}")
    return hits[0]


@dataclass(frozen=True)
class ClassificationItem:
    target: NodeId
    gold_label: str


@dataclass(frozen=True)
class LinkItem:
    """One candidate-set question: which of these five is the true endpoint."""

    anchor: NodeId
    candidates: Tuple[NodeId, ...]
    gold_index: int

    def __post_init__(self) -> None:
        if len(self.candidates) != LINK_CANDIDATE_COUNT:
            raise ValueError(f"link items need exactly {LINK_CANDIDATE_COUNT} candidates")
        if not 0 <= self.gold_index < LINK_CANDIDATE_COUNT:
            raise ValueError(f"gold_index {self.gold_index} out of range")

    @property
    def true_node(self) -> NodeId:
        return self.candidates[self.gold_index]


def build_classification_items(
    graph: TextGraph, labels: Mapping[NodeId, str], n: int, min_degree: int, seed: int
) -> List[ClassificationItem]:
    targets = sample_task_nodes(graph, n, min_degree, seed)
    missing = [t for t in targets if t not in labels]
    if missing:
        raise ValueError(f"missing labels for sampled nodes, e.g. {missing[:3]!r}")
    return [ClassificationItem(t, labels[t]) for t in targets]


def build_link_items(
    graph: TextGraph, n: int, min_degree: int, negatives: int, seed: int
) -> List[LinkItem]:
    """Sample eligible edges and assemble shuffled 5-way candidate sets.

    The anchor is the endpoint that appears first in the stored edge record;
    the other endpoint is hidden among ``negatives`` non-adjacent decoys at a
    seeded random position.
    """
    if negatives != LINK_CANDIDATE_COUNT - 1:
        raise ValueError(
            f"the candidate-set protocol uses {LINK_CANDIDATE_COUNT - 1} negatives, got {negatives}"
        )
    edges = sample_task_edges(graph, n, min_degree, seed)
    items: List[LinkItem] = []
    for anchor, true_node in edges:
        negs = sample_negatives(graph, anchor, true_node, negatives, seed)
        order = [true_node] + negs
        derive_stream(seed, "candidate_shuffle", anchor, true_node).shuffle(order)
        items.append(LinkItem(anchor, tuple(order), order.index(true_node)))
    return items


def link_working_graph(graph: TextGraph, items: Sequence[LinkItem]) -> TextGraph:
    """The evaluation graph: every sampled edge removed before encoding."""
    return graph.without_edges((item.anchor, item.true_node) for item in items)


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    prediction: Optional[str]
    gold: str
    correct: bool
    parse_failures: int
    retries: int
    prompt_tokens: int
    completion_tokens: int

    def to_json_dict(self) -> Dict:
        return {
            "item_id": self.item_id,
            "prediction": self.prediction,
            "gold": self.gold,
            "correct": self.correct,
            "parse_failures": self.parse_failures,
            "retries": self.retries,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


@dataclass(frozen=True)
class EvalReport:
    task: str  # classification | link
    config_hash: str
    encoding_key: str
    records: Tuple[ItemRecord, ...]
    metric: float
    usage: Dict

    def to_json_dict(self) -> Dict:
        return {
            "task": self.task,
            "config_hash": self.config_hash,
            "encoding_key": self.encoding_key,
            "metric": self.metric,
            "items": len(self.records),
            "correct": sum(1 for r in self.records if r.correct),
            "parse_failures": sum(r.parse_failures for r in self.records),
            "usage": self.usage,
        }


def metric_from_records(records: Sequence[ItemRecord]) -> float:
    """The fraction of correct items; the single formula both tasks report."""
    if not records:
        return 0.0
    return sum(1 for r in records if r.correct) / len(records)


def _task_key(kind: str, enc_key: str, model_id: str, context: str = "") -> str:
    material = f"task|{kind}|{enc_key}|{model_id}|{TEMPLATE_PACK_VERSION}|{context}"
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


def _ask(
    gateway: Gateway,
    cache: RepresentationCache,
    task_key: str,
    item_id: str,
    bundle: PromptBundle,
    choices: Sequence[str],
    tag: str,
    max_output_tokens: int,
) -> Tuple[Optional[str], int, int, int, int]:
    """One scored question with a single format-reminder retry.

    Returns (choice or None, parse_failures, retries, prompt_tokens,
    completion_tokens); token counts are attributed from the cache so cold
    and warm runs report identically.
    """
    model_id = getattr(gateway.backend, "model_id", "unknown")
    prompt_tokens = completion_tokens = 0
    parse_failures = 0
    for attempt in (0, 1):
        entry = cache.get(task_key, item_id, attempt)
        if entry is None:
            instruction = bundle.instruction_text
            if attempt == 1:
                instruction = f"{instruction}\n{FORMAT_REMINDER}"
            resp = gateway.complete(
                CompletionRequest(
                    instruction_text=instruction,
                    content_text=bundle.content_text,
                    model_id=model_id,
                    max_output_tokens=max_output_tokens,
                    request_tag=f"{tag}/attempt{attempt}",
                )
            )
            entry = CacheEntry(
                node=item_id,
                layer=attempt,
                text=resp.text,
                prompt_tokens=resp.prompt_tokens,
                completion_tokens=resp.completion_tokens,
            )
            cache.put(task_key, entry)
        prompt_tokens += entry.prompt_tokens
        completion_tokens += entry.completion_tokens
        try:
            choice = parse_answer(entry.text, choices)
            return choice, parse_failures, attempt, prompt_tokens, completion_tokens
        except AnswerParseError:
            parse_failures += 1
    return None, parse_failures, 1, prompt_tokens, completion_tokens


def attributed_encode_usage(
    graph: TextGraph,
    targets: Sequence[NodeId],
    cfg: EncoderConfig,
    cache: RepresentationCache,
    key_extras: Optional[Mapping] = None,
    neighbor_overrides: Optional[Mapping[NodeId, Sequence[NodeId]]] = None,
) -> Dict:
    """Token usage of the representations a run consumed, read from the cache.

    Cache-attributed rather than ledger-based, so the numbers are identical
    whether this run paid for the calls or inherited them.
    """
    if cfg.variant == "direct":
        return {"calls": 0, "prompt_tokens": 0, "completion_tokens": 0}
    key = encoding_key(cfg, graph, key_extras)
    if cfg.variant == "all_in_one":
        keys = [(t, 1) for t in sorted(set(targets))]
    else:
        plan = plan_receptive_field(graph, targets, cfg, neighbor_overrides)
        keys = plan.required_keys()
    prompt = completion = 0
    for node, layer in keys:
        entry = cache.get(key, node, layer)
        if entry is not None:
            prompt += entry.prompt_tokens
            completion += entry.completion_tokens
    return {"calls": len(keys), "prompt_tokens": prompt, "completion_tokens": completion}


def _final_representation(rep, domain_tag: str) -> str:
    return render_final_representation(rep.final_layers(), rep.texts[0], domain_tag)


def run_node_classification(
    graph: TextGraph,
    items: Sequence[ClassificationItem],
    cfg: EncoderConfig,
    backend,
    cache: RepresentationCache,
    *,
    labels: Mapping[NodeId, str],
    task_backend=None,
    max_output_tokens: int = 1024,
    manifest_path: Optional[str | Path] = None,
    workers: int = 1,
    corrupt_neighbors: Optional[Tuple[int, int]] = None,
) -> EvalReport:
    """Encode each target, ask for its class, score accuracy.

    ``corrupt_neighbors=(true_k, noise_k)`` runs the robustness variant where
    each target's neighbor list is partially replaced by random non-neighbors
    before encoding.
    """
    encode_gw = as_gateway(backend)
    task_gw = as_gateway(task_backend) if task_backend is not None else encode_gw
    classes = sorted(set(labels.values()))
    targets = [item.target for item in items]
    key_extras = None
    overrides = None
    if corrupt_neighbors is None:
        reps = encode(
            graph, targets, cfg, encode_gw, cache,
            max_output_tokens=max_output_tokens, manifest_path=manifest_path, workers=workers,
        )
    else:
        true_k, noise_k = corrupt_neighbors
        reps = encode_corrupted(
            graph, targets, cfg, encode_gw, cache, true_k, noise_k,
            max_output_tokens=max_output_tokens, manifest_path=manifest_path, workers=workers,
        )
        key_extras = corruption_key_extras(cfg, true_k, noise_k)
        overrides = {t: corrupt_neighborhood(graph, t, true_k, noise_k, cfg.seed) for t in targets}
    enc_key = encoding_key(cfg, graph, key_extras)
    task_model = getattr(task_gw.backend, "model_id", "unknown")
    task_key = _task_key("classification", enc_key, task_model, context=json.dumps(classes))

    records: List[ItemRecord] = []
    for item in items:
        final = _final_representation(reps[item.target], graph.domain_tag)
        bundle = build_node_classification_prompt(final, classes, graph.domain_tag)
        choice, failures, retries, p_tok, c_tok = _ask(
            task_gw, cache, task_key, item.target, bundle, classes,
            tag=f"classify/{enc_key}/{item.target}", max_output_tokens=max_output_tokens,
        )
        records.append(
            ItemRecord(
                item_id=item.target,
                prediction=choice,
                gold=item.gold_label,
                correct=choice == item.gold_label,
                parse_failures=failures,
                retries=retries,
                prompt_tokens=p_tok,
                completion_tokens=c_tok,
            )
        )
    usage = {
        "encode": attributed_encode_usage(
            graph, targets, cfg, cache, key_extras=key_extras, neighbor_overrides=overrides
        ),
        "task": {
            "calls": sum(1 + r.retries for r in records),
            "prompt_tokens": sum(r.prompt_tokens for r in records),
            "completion_tokens": sum(r.completion_tokens for r in records),
        },
    }
    return EvalReport(
        task="classification",
        config_hash=cfg.config_hash,
        encoding_key=enc_key,
        records=tuple(records),
        metric=metric_from_records(records),
        usage=usage,
    )


def run_link_prediction(
    graph: TextGraph,
    items: Sequence[LinkItem],
    cfg: EncoderConfig,
    backend,
    cache: RepresentationCache,
    *,
    task_backend=None,
    max_output_tokens: int = 1024,
    manifest_path: Optional[str | Path] = None,
    workers: int = 1,
) -> EvalReport:
    """Hit-ratio@1 over 5-way candidate sets, encoded on the edge-removed graph."""
    encode_gw = as_gateway(backend)
    task_gw = as_gateway(task_backend) if task_backend is not None else encode_gw
    working = link_working_graph(graph, items)
    targets = sorted({item.anchor for item in items} | {c for item in items for c in item.candidates})
    reps = encode(
        working, targets, cfg, encode_gw, cache,
        max_output_tokens=max_output_tokens, manifest_path=manifest_path, workers=workers,
    )
    enc_key = encoding_key(cfg, working)
    task_model = getattr(task_gw.backend, "model_id", "unknown")
    task_key = _task_key("link", enc_key, task_model)

    records: List[ItemRecord] = []
    for item in items:
        anchor_rep = _final_representation(reps[item.anchor], graph.domain_tag)
        candidates = [
            (i, _final_representation(reps[c], graph.domain_tag))
            for i, c in enumerate(item.candidates)
        ]
        bundle = build_link_prediction_prompt(anchor_rep, candidates, graph.domain_tag)
        item_id = f"{item.anchor}->{item.true_node}"
        choice, failures, retries, p_tok, c_tok = _ask(
            task_gw, cache, task_key, item_id, bundle, LINK_CHOICES,
            tag=f"link/{enc_key}/{item_id}", max_output_tokens=max_output_tokens,
        )
        records.append(
            ItemRecord(
                item_id=item_id,
                prediction=choice,
                gold=str(item.gold_index),
                correct=choice == str(item.gold_index),
                parse_failures=failures,
                retries=retries,
                prompt_tokens=p_tok,
                completion_tokens=c_tok,
            )
        )
    usage = {
        "encode": attributed_encode_usage(working, targets, cfg, cache),
        "task": {
            "calls": sum(1 + r.retries for r in records),
            "prompt_tokens": sum(r.prompt_tokens for r in records),
            "completion_tokens": sum(r.completion_tokens for r in records),
        },
    }
    return EvalReport(
        task="link",
        config_hash=cfg.config_hash,
        encoding_key=enc_key,
        records=tuple(records),
        metric=metric_from_records(records),
        usage=usage,
    )


@dataclass(frozen=True)
class AblationRow:
    graph_attention: bool
    initial_residual: bool
    classification: EvalReport
    link: EvalReport


ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))


def run_ablation_grid(
    graph: TextGraph,
    cls_items: Sequence[ClassificationItem],
    link_items: Sequence[LinkItem],
    base_cfg: EncoderConfig,
    backend,
    cache: RepresentationCache,
    *,
    labels: Mapping[NodeId, str],
    task_backend=None,
    max_output_tokens: int = 1024,
) -> List[AblationRow]:
    """Both tasks under the four attention/residual toggle settings.

    Task items and seeds are shared across the grid; only the prompt toggles
    change, so each row gets its own configuration hash.
    """
    rows: List[AblationRow] = []
    for ga, irc in ABLATION_GRID:
        cfg = replace(base_cfg, variant="gln", graph_attention=ga, initial_residual=irc)
        cls_report = run_node_classification(
            graph, cls_items, cfg, backend, cache,
            labels=labels, task_backend=task_backend, max_output_tokens=max_output_tokens,
        )
        link_report = run_link_prediction(
            graph, link_items, cfg, backend, cache,
            task_backend=task_backend, max_output_tokens=max_output_tokens,
        )
        rows.append(AblationRow(ga, irc, cls_report, link_report))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    """Text table mirroring the G.A. x I.R.C. grid layout."""
    lines = [f"{'G.A.':<6}{'I.R.C.':<8}{'Node.':>8}{'Link.':>8}"]
    for row in rows:
        lines.append(
            f"{_mark(row.graph_attention):<6}{_mark(row.initial_residual):<8}"
            f"{row.classification.metric:>8.3f}{row.link.metric:>8.3f}"
        )
    return "\n".join(lines)


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def write_eval_report(
    report: EvalReport, out_dir: str | Path, run_hash: str = ""
) -> Dict[str, Path]:
    """Persist per-item records (JSONL), the aggregate (JSON), and a text table."""
    out = Path(out_dir)
    records_dir = out / "records"
    reports_dir = out / "reports"
    records_dir.mkdir(parents=True, exist_ok=True)
    reports_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{report.task}-{report.config_hash}"

    records_path = records_dir / f"{stem}.jsonl"
    with records_path.open("w", encoding="utf-8") as fh:
        for record in report.records:
            doc = record.to_json_dict()
            if run_hash:
                doc["run_config_hash"] = run_hash
            fh.write(json.dumps(doc, ensure_ascii=False, sort_keys=True) + "\n")

    report_doc = report.to_json_dict()
    if run_hash:
        report_doc["run_config_hash"] = run_hash
    report_path = reports_dir / f"{stem}.json"
    report_path.write_text(json.dumps(report_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    metric_name = "accuracy" if report.task == "classification" else "hit_ratio_at_1"
    table = (
        f"task: {report.task}\n"
        f"config_hash: {report.config_hash}\n"
        + (f"run_config_hash: {run_hash}\n" if run_hash else "")
        + f"items: {len(report.records)}\n"
        f"{metric_name}: {report.metric:.4f}\n"
        f"parse_failures: {sum(r.parse_failures for r in report.records)}\n"
    )
    table_path = reports_dir / f"{stem}.txt"
    table_path.write_text(table, encoding="utf-8")
    return {"records": records_path, "report": report_path, "table": table_path}


def write_grid_csv(rows: Sequence[Mapping], path: str | Path, run_hash: str = "") -> Path:
    """Metric-grid CSV used by the ablation and sweep commands."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = list(rows[0].keys())
    if run_hash:
        fieldnames.append("run_config_hash")
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            doc = dict(row)
            if run_hash:
                doc["run_config_hash"] = run_hash
            writer.writerow(doc)
    return path


def recompute_metric_from_jsonl(path: str | Path) -> Tuple[float, int]:
    """Re-derive a report's metric from its persisted per-item records."""
    correct = total = 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            total += 1
            correct += 1 if rec["correct"] else 0
    return (correct / total if total else 0.0), total
