"""Fixed inputs used both to generate and to check the golden prompt files."""

from __future__ import annotations

from textgnn.config import EncoderConfig
from textgnn.prompts import (
    PromptBundle,
    build_all_in_one_prompt,
    build_denoise_prompt,
    build_judge_prompt,
    build_link_prediction_prompt,
    build_message_prompt,
    build_node_classification_prompt,
    build_promptgfm_prompt,
    render_final_representation,
)

TARGET_INITIAL = "A study of sequence transduction built entirely on attention."
TARGET_PREV = "A broad treatment of attention-based sequence models and their uses."
NEIGHBOR_REPS = [
    ("n1", "Work on recurrent translation systems with soft alignment."),
    ("n2", "Work on convolutional encoders for text generation."),
]
NEIGHBOR_INITIALS = {
    "n1": "Neural machine translation by jointly learning to align and translate.",
    "n2": "Convolutional sequence to sequence learning.",
}
TWO_HOP_REPS = [
    ("m1", "Work on large-scale language model pretraining."),
    ("m2", "Work on image recognition with deep networks."),
]
CLASSES = ["databases", "machine learning", "networking"]
CANDIDATES = [(i, f"Candidate description number {i}.") for i in range(5)]
JUDGE_REPS = {
    "l1_base": "Layer-one summary of nearby works.",
    "l2_base": "Layer-two summary reaching broader fields.",
    "l1_attention": "Layer-one summary centered on the target's own task.",
    "l2_residual": "Layer-two summary that keeps the target's original focus.",
}
DENOISE_TEXT = "study of transduction built attention with noise words dropped"


def golden_bundles(domain_tag: str) -> dict[str, PromptBundle | str]:
    """Every golden artifact for one domain, keyed by file stem."""
    full_cfg = EncoderConfig(
        domain_tag=domain_tag, variant="gln", graph_attention=True,
        initial_residual=True, seed=1,
    )
    base_cfg = EncoderConfig(domain_tag=domain_tag, variant="gln_base", seed=1)
    return {
        "encode_l2_full": build_message_prompt(
            TARGET_PREV, TARGET_INITIAL, NEIGHBOR_REPS, full_cfg, layer=2,
            target_id="t1", neighbor_initials=NEIGHBOR_INITIALS,
        ),
        "encode_l1_base": build_message_prompt(
            TARGET_INITIAL, TARGET_INITIAL, NEIGHBOR_REPS, base_cfg, layer=1, target_id="t1",
        ),
        "promptgfm": build_promptgfm_prompt(
            TARGET_INITIAL, NEIGHBOR_REPS, base_cfg, layer=1, target_id="t1",
        ),
        "all_in_one": build_all_in_one_prompt(
            TARGET_INITIAL, NEIGHBOR_REPS, TWO_HOP_REPS,
            EncoderConfig(domain_tag=domain_tag, variant="all_in_one", seed=1),
            target_id="t1",
        ),
        "classify": build_node_classification_prompt(
            render_final_representation({1: TARGET_PREV}, TARGET_INITIAL, domain_tag),
            CLASSES, domain_tag,
        ),
        "link": build_link_prediction_prompt(
            render_final_representation({1: TARGET_PREV}, TARGET_INITIAL, domain_tag),
            CANDIDATES, domain_tag,
        ),
        "final_representation_l2": render_final_representation(
            {1: "layer one text", 2: "layer two text"}, TARGET_INITIAL, domain_tag
        ),
    }


def common_golden_bundles() -> dict[str, PromptBundle]:
    out = {
        f"judge_observation_{obs}": build_judge_prompt(JUDGE_REPS, obs) for obs in (1, 2, 3)
    }
    out["denoise"] = build_denoise_prompt(DENOISE_TEXT)
    return out


def bundle_bytes(artifact: PromptBundle | str) -> str:
    if isinstance(artifact, str):
        return artifact
    return f"{artifact.instruction_text}\n<<<CONTENT>>>\n{artifact.content_text}"
