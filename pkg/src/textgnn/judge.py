"""Quantifying the qualitative claims: three questions, judged per node.

For each sampled node the study extracts four representation variants (the
plain two-layer pass, a one-layer pass with the attention clause, and a
two-layer pass with the residual structure), then asks a judge backend one
yes/no/unclear question per claim over the relevant pair. Tallies are
aggregated question-major; nodes whose judge response fails parsing after
one retry are excluded from that question's denominator and reported.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .cache import CacheEntry, RepresentationCache
from .config import EncoderConfig
from .encoder import encode, encoding_key
from .evaluation import AnswerParseError, FORMAT_REMINDER, parse_answer
from .gateway import CompletionRequest, as_gateway
from .graph import TextGraph
from .prompts import JUDGE_CATEGORIES, TEMPLATE_PACK_VERSION, build_judge_prompt
from .sampling import sample_task_nodes

OBSERVATIONS = (1, 2, 3)


@dataclass(frozen=True)
class JudgeRecord:
    node: str
    observation: int
    category: Optional[str]
    parse_failures: int
    retries: int

    def to_json_dict(self) -> Dict:
        return {
            "node": self.node,
            "observation": self.observation,
            "category": self.category,
            "parse_failures": self.parse_failures,
            "retries": self.retries,
        }


@dataclass(frozen=True)
class JudgeStudy:
    nodes: Tuple[str, ...]
    records: Tuple[JudgeRecord, ...]
    judge_calls: int

    def tallies(self) -> Dict[int, Dict[str, int]]:
        out = {obs: {cat: 0 for cat in JUDGE_CATEGORIES} for obs in OBSERVATIONS}
        for rec in self.records:
            if rec.category is not None:
                out[rec.observation][rec.category] += 1
        return out

    def ratios(self) -> Dict[int, Dict[str, float]]:
        out: Dict[int, Dict[str, float]] = {}
        for obs, counts in self.tallies().items():
            denom = sum(counts.values())
            out[obs] = {cat: (n / denom if denom else 0.0) for cat, n in counts.items()}
        return out

    def failed_records(self) -> List[JudgeRecord]:
        return [r for r in self.records if r.category is None]

    def to_json_dict(self) -> Dict:
        return {
            "nodes": list(self.nodes),
            "judge_calls": self.judge_calls,
            "ratios": {str(obs): r for obs, r in self.ratios().items()},
            "tallies": {str(obs): t for obs, t in self.tallies().items()},
            "failures": [r.to_json_dict() for r in self.failed_records()],
            "records": [r.to_json_dict() for r in self.records],
        }


def study_configs(domain_tag: str, seed: int, neighbor_k: int = 10) -> Dict[str, EncoderConfig]:
    """The three encoding regimes whose outputs the judge compares."""
    base = EncoderConfig(
        domain_tag=domain_tag, layers=2, neighbor_k=neighbor_k,
        variant="gln_base", seed=seed,
    )
    attention = EncoderConfig(
        domain_tag=domain_tag, layers=1, neighbor_k=neighbor_k,
        variant="gln", graph_attention=True, seed=seed,
    )
    residual = EncoderConfig(
        domain_tag=domain_tag, layers=2, neighbor_k=neighbor_k,
        variant="gln", initial_residual=True, seed=seed,
    )
    return {"base": base, "attention": attention, "residual": residual}


def run_judge_study(
    graph: TextGraph,
    n: int,
    backend_encode,
    backend_judge,
    cache: RepresentationCache,
    seed: int,
    *,
    min_degree: int = 1,
    neighbor_k: int = 10,
    max_output_tokens: int = 1024,
) -> JudgeStudy:
    """Sample n nodes, extract the four representations, tally judge answers."""
    nodes = sample_task_nodes(graph, n, min_degree, seed)
    configs = study_configs(graph.domain_tag, seed, neighbor_k)
    encode_gw = as_gateway(backend_encode)
    judge_gw = as_gateway(backend_judge)

    base_reps = encode(graph, nodes, configs["base"], encode_gw, cache,
                       max_output_tokens=max_output_tokens)
    att_reps = encode(graph, nodes, configs["attention"], encode_gw, cache,
                      max_output_tokens=max_output_tokens)
    res_reps = encode(graph, nodes, configs["residual"], encode_gw, cache,
                      max_output_tokens=max_output_tokens)

    judge_model = getattr(judge_gw.backend, "model_id", "unknown")
    key_material = "|".join(
        ["judge", encoding_key(configs["base"], graph), encoding_key(configs["attention"], graph),
         encoding_key(configs["residual"], graph), judge_model, TEMPLATE_PACK_VERSION]
    )
    judge_key = hashlib.sha256(key_material.encode("utf-8")).hexdigest()[:16]

    records: List[JudgeRecord] = []
    judge_calls = 0
    # Question-major order: every node is judged on observation 1, then 2, then 3.
    for observation in OBSERVATIONS:
        for node in nodes:
            reps = {
                "l1_base": base_reps[node].texts[1],
                "l2_base": base_reps[node].texts[2],
                "l1_attention": att_reps[node].texts[1],
                "l2_residual": res_reps[node].texts[2],
            }
            bundle = build_judge_prompt(reps, observation)
            category: Optional[str] = None
            parse_failures = 0
            retries = 0
            for attempt in (0, 1):
                # The layer slot stores observation and attempt together.
                slot = observation * 10 + attempt
                entry = cache.get(judge_key, node, slot)
                if entry is None:
                    instruction = bundle.instruction_text
                    if attempt == 1:
                        instruction = f"{instruction}\n{FORMAT_REMINDER}"
                    resp = judge_gw.complete(
                        CompletionRequest(
                            instruction_text=instruction,
                            content_text=bundle.content_text,
                            model_id=judge_model,
                            max_output_tokens=max_output_tokens,
                            request_tag=f"judge/{judge_key}/{observation}/{node}/attempt{attempt}",
                        )
                    )
                    entry = CacheEntry(node=node, layer=slot, text=resp.text,
                                       prompt_tokens=resp.prompt_tokens,
                                       completion_tokens=resp.completion_tokens)
                    cache.put(judge_key, entry)
                judge_calls += 1
                retries = attempt
                try:
                    category = parse_answer(entry.text, JUDGE_CATEGORIES)
                    break
                except AnswerParseError:
                    parse_failures += 1
            records.append(JudgeRecord(node, observation, category, parse_failures, retries))
    return JudgeStudy(nodes=tuple(nodes), records=tuple(records), judge_calls=judge_calls)


def write_judge_study(study: JudgeStudy, out_dir: str | Path, run_hash: str = "") -> Dict[str, Path]:
    """Persist the study JSON plus a plot-ready (question, category, ratio) CSV."""
    out = Path(out_dir)
    reports_dir = out / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    doc = study.to_json_dict()
    if run_hash:
        doc["run_config_hash"] = run_hash
    json_path = reports_dir / "judge_study.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_path = reports_dir / "judge_study.csv"
    lines = ["question,category,ratio"]
    for obs, ratio in sorted(study.ratios().items()):
        for cat in JUDGE_CATEGORIES:
            lines.append(f"{obs},{cat},{ratio[cat]:.6f}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"json": json_path, "csv": csv_path}
