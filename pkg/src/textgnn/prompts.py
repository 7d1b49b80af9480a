"""Prompt construction for encoding, downstream tasks, judging, and denoising.

All wording lives in the template pack under ``templates/`` (one directory
per graph domain plus ``common/``); this module only assembles. Every build
function is a pure function of its arguments, so golden files beside the
templates can pin the output bytes.

Task prompts end with a strict one-line answer contract
(``ANSWER: <choice>``) so responses are machine-scorable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .config import EncoderConfig
from .gateway import node_marker
from .graph import DOMAIN_TAGS, NodeId

TEMPLATE_ROOT = Path(__file__).parent / "templates"
TEMPLATE_PACK_VERSION = (TEMPLATE_ROOT / "VERSION").read_text(encoding="utf-8").strip()

PURPOSES = ("encode", "classify", "link_predict", "judge", "denoise")

ENTITY_KEYWORDS = {"citation": "Paper", "co-purchase": "Book", "hyperlink": "Web page"}

LENGTH_RULES = {
    "two_paragraphs": "Limit the output to 2 paragraphs.",
    "three_sentences": "Limit the output to 3 sentences.",
}

# The single-prompt baseline feeds fixed neighbor budgets.
ALL_IN_ONE_ONE_HOP_CAP = 10
ALL_IN_ONE_TWO_HOP_CAP = 20

LINK_CANDIDATE_COUNT = 5

JUDGE_REP_KEYS = ("l1_base", "l2_base", "l1_attention", "l2_residual")
JUDGE_CATEGORIES = ("agree", "disagree", "unclear")
# Which pair of representations each observation question compares.
JUDGE_PAIRS = {1: ("l1_base", "l2_base"), 2: ("l1_base", "l1_attention"), 3: ("l2_base", "l2_residual")}

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")


class PromptError(Exception):
    """Invalid prompt-construction input."""


@dataclass(frozen=True)
class PromptBundle:
    """A fully materialized instruction/content pair plus provenance."""

    instruction_text: str
    content_text: str
    purpose: str
    layer: Optional[int] = None
    target: str = ""
    config_hash: str = ""


def render_template(template: str, **values: str) -> str:
    """Substitute ``{{name}}`` placeholders; unknown or missing names fail."""

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise PromptError(f"template placeholder {{{{{name}}}}} has no value")
        return values[name]

    return _PLACEHOLDER_RE.sub(sub, template)


@dataclass(frozen=True)
class TemplatePack:
    domain_tag: str
    phrases: Mapping[str, str]
    files: Mapping[str, str]

    def file(self, name: str) -> str:
        if name not in self.files:
            raise PromptError(f"template pack {self.domain_tag!r} is missing {name!r}")
        return self.files[name]


@lru_cache(maxsize=None)
def load_pack(domain_tag: str) -> TemplatePack:
    if domain_tag not in DOMAIN_TAGS:
        raise PromptError(f"unknown domain_tag {domain_tag!r}")
    root = TEMPLATE_ROOT / domain_tag
    phrases = json.loads((root / "pack.json").read_text(encoding="utf-8"))
    files = {
        p.name: p.read_text(encoding="utf-8").rstrip("\n")
        for p in sorted(root.glob("*.txt"))
    }
    return TemplatePack(domain_tag=domain_tag, phrases=phrases, files=files)


@lru_cache(maxsize=None)
def _common_template(name: str) -> str:
    return (TEMPLATE_ROOT / "common" / name).read_text(encoding="utf-8").rstrip("\n")


def _ga_clause(cfg: EncoderConfig, pack: TemplatePack) -> str:
    if not cfg.graph_attention:
        return ""
    key = "ga_clause_default" if cfg.ga_phrase == "default" else "ga_clause_alternative"
    return pack.phrases[key] + "\n"


def _node_description(prev_text: str, initial_text: Optional[str], cfg: EncoderConfig, layer: int,
                      pack: TemplatePack) -> str:
    """One node's description inside an encode prompt.

    With the residual structure enabled (and past layer 1, where the previous
    output *is* the initial attribute), the description carries both the
    original attribute and the latest refinement; otherwise just the latest.
    """
    if not (cfg.initial_residual and layer >= 2):
        return prev_text
    if initial_text is None:
        raise PromptError("initial_residual prompts need each node's initial attribute")
    if cfg.irc_style == "itemized":
        return f"- Initial description: {initial_text}\n- Current description: {prev_text}"
    return (
        f"The detailed description is {initial_text}. "
        f"The version updated by {pack.phrases['relation_phrase']} is {prev_text}"
    )


def _numbered_blocks(entries: Sequence[Tuple[NodeId, str]], inject_markers: bool) -> str:
    blocks = []
    for i, (node_id, desc) in enumerate(entries, start=1):
        marker = node_marker(node_id) + " " if inject_markers else ""
        blocks.append(f"[{i}] {marker}{desc}")
    return "\n\n".join(blocks)


def build_message_prompt(
    target_rep: str,
    target_initial: str,
    neighbor_reps: Sequence[Tuple[NodeId, str]],
    cfg: EncoderConfig,
    layer: int,
    *,
    target_id: NodeId = "",
    neighbor_initials: Optional[Mapping[NodeId, str]] = None,
    inject_markers: bool = False,
) -> PromptBundle:
    """The per-layer aggregation prompt, with attention/residual clause toggles.

    ``neighbor_reps`` holds (node id, previous-layer text) in sampled order;
    ``neighbor_initials`` supplies initial attributes when the residual
    structure is active. Identity markers are injected only for backends
    that understand them (the offline mock).
    """
    if not 1 <= layer <= cfg.layers:
        raise PromptError(f"layer {layer} outside 1..{cfg.layers}")
    if not neighbor_reps:
        raise PromptError("neighbor_reps must be non-empty (isolated nodes are handled upstream)")
    if len(neighbor_reps) > cfg.neighbor_k:
        raise PromptError(f"{len(neighbor_reps)} neighbor blocks exceed neighbor_k={cfg.neighbor_k}")
    pack = load_pack(cfg.domain_tag)
    instruction = render_template(
        pack.file("encode_instruction.txt"),
        ga_clause=_ga_clause(cfg, pack),
        length_rule=LENGTH_RULES[cfg.output_constraint],
    )
    neighbor_initials = neighbor_initials or {}
    target_desc = _node_description(target_rep, target_initial, cfg, layer, pack)
    if inject_markers:
        target_desc = f"{node_marker(target_id)} {target_desc}"
    entries = []
    for node_id, rep in neighbor_reps:
        initial = neighbor_initials.get(node_id) if cfg.initial_residual and layer >= 2 else None
        entries.append((node_id, _node_description(rep, initial, cfg, layer, pack)))
    content = render_template(
        pack.file("encode_content.txt"),
        target=target_desc,
        neighbors=_numbered_blocks(entries, inject_markers),
    )
    return PromptBundle(instruction, content, "encode", layer=layer, target=target_id,
                        config_hash=cfg.config_hash)


def build_promptgfm_prompt(
    target_rep: str,
    neighbor_reps: Sequence[Tuple[NodeId, str]],
    cfg: EncoderConfig,
    layer: int = 1,
    *,
    target_id: NodeId = "",
    inject_markers: bool = False,
) -> PromptBundle:
    """Aggregate-and-update baseline prompt; same content layout, no clause toggles."""
    if not neighbor_reps:
        raise PromptError("neighbor_reps must be non-empty")
    if len(neighbor_reps) > cfg.neighbor_k:
        raise PromptError(f"{len(neighbor_reps)} neighbor blocks exceed neighbor_k={cfg.neighbor_k}")
    pack = load_pack(cfg.domain_tag)
    target_desc = target_rep
    if inject_markers:
        target_desc = f"{node_marker(target_id)} {target_desc}"
    content = render_template(
        pack.file("encode_content.txt"),
        target=target_desc,
        neighbors=_numbered_blocks(list(neighbor_reps), inject_markers),
    )
    return PromptBundle(pack.file("promptgfm_instruction.txt"), content, "encode",
                        layer=layer, target=target_id, config_hash=cfg.config_hash)


def build_all_in_one_prompt(
    target_initial: str,
    one_hop: Sequence[Tuple[NodeId, str]],
    two_hop: Sequence[Tuple[NodeId, str]],
    cfg: EncoderConfig,
    *,
    target_id: NodeId = "",
    inject_markers: bool = False,
) -> PromptBundle:
    """Single-prompt baseline: target plus labeled one-hop and two-hop blocks."""
    if len(one_hop) > ALL_IN_ONE_ONE_HOP_CAP:
        raise PromptError(f"one-hop list of {len(one_hop)} exceeds cap {ALL_IN_ONE_ONE_HOP_CAP}")
    if len(two_hop) > ALL_IN_ONE_TWO_HOP_CAP:
        raise PromptError(f"two-hop list of {len(two_hop)} exceeds cap {ALL_IN_ONE_TWO_HOP_CAP}")
    pack = load_pack(cfg.domain_tag)
    instruction = render_template(
        pack.file("all_in_one_instruction.txt"),
        length_rule=LENGTH_RULES[cfg.output_constraint],
    )
    target_desc = target_initial
    if inject_markers:
        target_desc = f"{node_marker(target_id)} {target_desc}"
    content = render_template(
        pack.file("all_in_one_content.txt"),
        target=target_desc,
        one_hop=_numbered_blocks(list(one_hop), inject_markers) if one_hop else "none",
        two_hop=_numbered_blocks(list(two_hop), inject_markers) if two_hop else "none",
    )
    return PromptBundle(instruction, content, "encode", layer=1, target=target_id,
                        config_hash=cfg.config_hash)


def _layer_label(layer: int) -> str:
    if layer == 1:
        return "General description"
    if layer == 2:
        return "Highly general description"
    return f"Level-{layer} general description"


def render_final_representation(layered: Mapping[int, str], initial: str, domain_tag: str) -> str:
    """Composite representation: entity keyword plus itemized per-layer texts."""
    if domain_tag not in ENTITY_KEYWORDS:
        raise PromptError(f"unknown domain_tag {domain_tag!r}")
    top = max(layered) if layered else 0
    missing = [t for t in range(1, top + 1) if t not in layered]
    if missing:
        raise PromptError(f"layered representation is missing layer(s) {missing}")
    items = [("Detailed description", initial)]
    for t in range(1, top + 1):
        items.append((_layer_label(t), layered[t]))
    body = ",\n".join(f"- {label}: {text}" for label, text in items)
    return f"{ENTITY_KEYWORDS[domain_tag]}: {{\n{body}}}"


def parse_final_representation(text: str) -> Tuple[str, Dict[str, str]]:
    """Validate a composite representation, returning (entity keyword, items).

    Raises PromptError when the text does not match the expected grammar:
    an entity keyword, a brace block, and 2-3 labeled items in order.
    """
    header = re.match(r"(Paper|Book|Web page): \{\n", text)
    if not header:
        raise PromptError("final representation must start with '<Entity>: {'")
    keyword = header.group(1)
    if not text.endswith("}"):
        raise PromptError("final representation must end with '}'")
    body = text[header.end():-1]
    labels = ["Detailed description", "General description", "Highly general description"]
    anchors: List[Tuple[int, str]] = []
    cursor = 0
    for i, label in enumerate(labels):
        marker = ("" if i == 0 else "\n") + f"- {label}: "
        idx = body.find(marker, cursor)
        if idx == -1:
            if i == 2:
                break  # third item only present for two or more layers
            raise PromptError(f"missing item {label!r}")
        anchors.append((idx, label))
        cursor = idx + len(marker)
    items: Dict[str, str] = {}
    for j, (idx, label) in enumerate(anchors):
        start = idx + len(f"- {label}: ") + (0 if j == 0 else 1)
        end = anchors[j + 1][0] if j + 1 < len(anchors) else len(body)
        value = body[start:end]
        items[label] = value[:-1] if j + 1 < len(anchors) and value.endswith(",") else value
    return keyword, items


def build_node_classification_prompt(final_rep: str, classes: Sequence[str], domain_tag: str) -> PromptBundle:
    """Single-choice classification over an indexed category list."""
    if not classes:
        raise PromptError("class list must be non-empty")
    if len(set(classes)) != len(classes):
        raise PromptError("class list must be unique")
    pack = load_pack(domain_tag)
    class_block = "\n".join(f"{i}. {label}" for i, label in enumerate(classes))
    instruction = render_template(pack.file("classify_instruction.txt"), classes=class_block)
    content = render_template(pack.file("classify_content.txt"), target=final_rep)
    return PromptBundle(instruction, content, "classify")


def build_link_prediction_prompt(
    anchor_rep: str, candidates: Sequence[Tuple[int, str]], domain_tag: str
) -> PromptBundle:
    """Pick-one-of-five prompt with the domain's relation question.

    ``candidates`` arrive pre-shuffled by the caller as (index, representation)
    pairs and are presented in exactly that order.
    """
    if len(candidates) != LINK_CANDIDATE_COUNT:
        raise PromptError(f"expected {LINK_CANDIDATE_COUNT} candidates, got {len(candidates)}")
    pack = load_pack(domain_tag)
    candidate_block = "\n\n".join(f"[{index}] {rep}" for index, rep in candidates)
    content = render_template(pack.file("link_content.txt"), anchor=anchor_rep,
                              candidates=candidate_block)
    return PromptBundle(pack.file("link_instruction.txt"), content, "link_predict")


def build_judge_prompt(reps: Mapping[str, str], observation_id: int) -> PromptBundle:
    """Yes/no/unclear question about one observation over the relevant pair."""
    if set(reps) != set(JUDGE_REP_KEYS):
        raise PromptError(f"judge needs exactly the representations {JUDGE_REP_KEYS}")
    if observation_id not in JUDGE_PAIRS:
        raise PromptError(f"observation_id must be 1, 2 or 3, got {observation_id}")
    key_a, key_b = JUDGE_PAIRS[observation_id]
    instruction = _common_template(f"judge_observation_{observation_id}.txt")
    content = render_template(_common_template("judge_content.txt"),
                              rep_a=reps[key_a], rep_b=reps[key_b])
    return PromptBundle(instruction, content, "judge")


def build_denoise_prompt(raw_text: str) -> PromptBundle:
    """Key-concept extraction prompt used to clean noisy attributes."""
    if not raw_text:
        raise PromptError("raw_text must be non-empty")
    return PromptBundle(_common_template("denoise_instruction.txt"), raw_text, "denoise")
