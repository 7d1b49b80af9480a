"""Prompt construction: clause toggles, caps, formats, golden regression."""

from __future__ import annotations

import itertools

import pytest

from textgnn.config import ConfigError, EncoderConfig
from textgnn.gateway import node_marker
from textgnn.prompts import (
    JUDGE_CATEGORIES,
    PromptError,
    TEMPLATE_ROOT,
    build_all_in_one_prompt,
    build_denoise_prompt,
    build_judge_prompt,
    build_link_prediction_prompt,
    build_message_prompt,
    build_node_classification_prompt,
    build_promptgfm_prompt,
    load_pack,
    parse_final_representation,
    render_final_representation,
    render_template,
)

from golden_inputs import (
    CANDIDATES,
    CLASSES,
    JUDGE_REPS,
    NEIGHBOR_INITIALS,
    NEIGHBOR_REPS,
    TARGET_INITIAL,
    TARGET_PREV,
    bundle_bytes,
    common_golden_bundles,
    golden_bundles,
)

GA_CLAUSE = "give more emphasis to those more relevant to the target"
GA_CLAUSE_ALT = "weigh highly the works most closely related"
IRC_MARKER = "- Initial description: "
TWO_PARAGRAPHS = "Limit the output to 2 paragraphs."
THREE_SENTENCES = "Limit the output to 3 sentences."
PROMPTGFM_SENTENCE = (
    "aggregate neighbor nodes and update a concise yet meaningful representation for the central node"
)


def cfg_with(**kw) -> EncoderConfig:
    defaults = dict(domain_tag="citation", variant="gln", seed=1)
    defaults.update(kw)
    return EncoderConfig(**defaults)


def message_prompt(cfg: EncoderConfig, layer: int = 2):
    return build_message_prompt(
        TARGET_PREV, TARGET_INITIAL, NEIGHBOR_REPS, cfg, layer,
        target_id="t1", neighbor_initials=NEIGHBOR_INITIALS,
    )


@pytest.mark.parametrize(
    "ga,irc,constraint",
    list(itertools.product([False, True], [False, True], ["two_paragraphs", "three_sentences"])),
)
def test_clause_toggle_grid(ga, irc, constraint):
    cfg = cfg_with(graph_attention=ga, initial_residual=irc, output_constraint=constraint)
    bundle = message_prompt(cfg, layer=2)
    whole = bundle.instruction_text + "\n" + bundle.content_text
    assert (GA_CLAUSE in whole) == ga
    assert (IRC_MARKER in whole) == irc
    assert (TWO_PARAGRAPHS in whole) == (constraint == "two_paragraphs")
    assert (THREE_SENTENCES in whole) == (constraint == "three_sentences")


def test_ga_alternative_phrase():
    bundle = message_prompt(cfg_with(graph_attention=True, ga_phrase="alternative"))
    assert GA_CLAUSE_ALT in bundle.instruction_text
    assert GA_CLAUSE not in bundle.instruction_text


def test_ga_clause_appears_exactly_once():
    bundle = message_prompt(cfg_with(graph_attention=True))
    assert bundle.instruction_text.count(GA_CLAUSE) == 1


def test_irc_suppressed_at_layer_one():
    bundle = message_prompt(cfg_with(initial_residual=True), layer=1)
    assert IRC_MARKER not in bundle.content_text


def test_irc_plain_text_style():
    cfg = cfg_with(initial_residual=True, irc_style="plain_text")
    bundle = message_prompt(cfg, layer=2)
    assert IRC_MARKER not in bundle.content_text
    assert "The detailed description is" in bundle.content_text
    assert "The version updated by papers that cite or are cited by it is" in bundle.content_text


def test_gln_base_has_no_clauses():
    cfg = EncoderConfig(domain_tag="citation", variant="gln_base", seed=1)
    bundle = build_message_prompt(
        TARGET_PREV, TARGET_INITIAL, NEIGHBOR_REPS, cfg, 2, target_id="t1"
    )
    whole = bundle.instruction_text + bundle.content_text
    assert GA_CLAUSE not in whole
    assert IRC_MARKER not in whole


def test_gln_base_forbids_flags():
    with pytest.raises(ConfigError):
        EncoderConfig(domain_tag="citation", variant="gln_base", graph_attention=True)


def test_target_prev_rep_appears_exactly_once():
    for cfg in (cfg_with(), cfg_with(initial_residual=True)):
        bundle = message_prompt(cfg, layer=2)
        assert bundle.content_text.count(TARGET_PREV) == 1


def test_neighbor_cap_enforced():
    cfg = cfg_with(neighbor_k=2)
    too_many = NEIGHBOR_REPS + [("n3", "extra")]
    with pytest.raises(PromptError, match="exceed neighbor_k"):
        build_message_prompt(TARGET_PREV, TARGET_INITIAL, too_many, cfg, 1, target_id="t1")


def test_empty_neighbors_rejected():
    with pytest.raises(PromptError, match="non-empty"):
        build_message_prompt(TARGET_PREV, TARGET_INITIAL, [], cfg_with(), 1, target_id="t1")


def test_marker_injection_only_on_request():
    cfg = cfg_with()
    clean = message_prompt(cfg)
    assert "⟦" not in clean.content_text
    marked = build_message_prompt(
        TARGET_PREV, TARGET_INITIAL, NEIGHBOR_REPS, cfg, 2,
        target_id="t1", neighbor_initials=NEIGHBOR_INITIALS, inject_markers=True,
    )
    assert node_marker("t1") in marked.content_text
    assert node_marker("n1") in marked.content_text


def test_promptgfm_verbatim_sentence_and_no_clauses():
    cfg = cfg_with()
    bundle = build_promptgfm_prompt(TARGET_INITIAL, NEIGHBOR_REPS, cfg, target_id="t1")
    assert PROMPTGFM_SENTENCE in bundle.instruction_text
    assert GA_CLAUSE not in bundle.instruction_text
    assert IRC_MARKER not in bundle.content_text


def test_promptgfm_differs_from_gln_only_in_instruction():
    cfg = EncoderConfig(domain_tag="citation", variant="gln_base", seed=1)
    gfm = build_promptgfm_prompt(TARGET_INITIAL, NEIGHBOR_REPS, cfg, layer=1, target_id="t1")
    gln = build_message_prompt(TARGET_INITIAL, TARGET_INITIAL, NEIGHBOR_REPS, cfg, 1, target_id="t1")
    assert gfm.content_text == gln.content_text
    assert gfm.instruction_text != gln.instruction_text


def test_all_in_one_blocks_and_caps():
    cfg = EncoderConfig(domain_tag="citation", variant="all_in_one", seed=1)
    two_hop = [(f"m{i}", f"desc {i}") for i in range(20)]
    bundle = build_all_in_one_prompt(TARGET_INITIAL, NEIGHBOR_REPS, two_hop, cfg, target_id="t1")
    assert "One-hop neighbors:" in bundle.content_text
    assert "Two-hop neighbors:" in bundle.content_text
    assert bundle.content_text.index("Target paper:") < bundle.content_text.index("One-hop")
    assert bundle.content_text.index("One-hop") < bundle.content_text.index("Two-hop")
    assert bundle.content_text.count("[") == 22  # 2 one-hop + 20 two-hop blocks
    with pytest.raises(PromptError, match="cap"):
        build_all_in_one_prompt(TARGET_INITIAL, NEIGHBOR_REPS, two_hop + [("x", "d")], cfg)


def test_all_in_one_empty_two_hop_says_none():
    cfg = EncoderConfig(domain_tag="citation", variant="all_in_one", seed=1)
    bundle = build_all_in_one_prompt(TARGET_INITIAL, NEIGHBOR_REPS, [], cfg, target_id="t1")
    assert "Two-hop neighbors:\nnone" in bundle.content_text


@pytest.mark.parametrize(
    "domain,keyword", [("citation", "Paper"), ("co-purchase", "Book"), ("hyperlink", "Web page")]
)
def test_final_representation_keyword_and_items(domain, keyword):
    two_layer = render_final_representation({1: "l1", 2: "l2"}, "init", domain)
    assert two_layer.startswith(f"{keyword}: {{")
    parsed_keyword, items = parse_final_representation(two_layer)
    assert parsed_keyword == keyword
    assert list(items) == ["Detailed description", "General description", "Highly general description"]
    assert items["Detailed description"] == "init"
    assert items["Highly general description"] == "l2"

    one_layer = render_final_representation({1: "l1"}, "init", domain)
    _, items = parse_final_representation(one_layer)
    assert list(items) == ["Detailed description", "General description"]


def test_final_representation_missing_layer():
    with pytest.raises(PromptError, match="missing layer"):
        render_final_representation({2: "l2"}, "init", "citation")


def test_final_representation_multiline_values_parse():
    text = render_final_representation({1: "line1\nline2"}, "first\nsecond", "citation")
    _, items = parse_final_representation(text)
    assert items["Detailed description"] == "first\nsecond"
    assert items["General description"] == "line1\nline2"


def test_classification_prompt_lists_classes():
    bundle = build_node_classification_prompt("rep text", CLASSES, "citation")
    for i, label in enumerate(CLASSES):
        assert f"{i}. {label}" in bundle.instruction_text
    assert "ANSWER: <category>" in bundle.instruction_text
    with pytest.raises(PromptError):
        build_node_classification_prompt("rep", [], "citation")
    with pytest.raises(PromptError):
        build_node_classification_prompt("rep", ["a", "a"], "citation")


def test_link_prompt_candidate_count_and_order():
    bundle = build_link_prediction_prompt("anchor rep", CANDIDATES, "co-purchase")
    assert "co-purchased" in bundle.instruction_text
    positions = [bundle.content_text.index(f"[{i}]") for i in range(5)]
    assert positions == sorted(positions)
    with pytest.raises(PromptError, match="5 candidates"):
        build_link_prediction_prompt("anchor rep", CANDIDATES[:4], "co-purchase")


def test_link_prompt_citation_phrasing():
    bundle = build_link_prediction_prompt("anchor rep", CANDIDATES, "citation")
    assert "cite" in bundle.instruction_text


def test_judge_prompt_pairs():
    b1 = build_judge_prompt(JUDGE_REPS, 1)
    assert JUDGE_REPS["l1_base"] in b1.content_text
    assert JUDGE_REPS["l2_base"] in b1.content_text
    assert JUDGE_REPS["l1_attention"] not in b1.content_text

    b2 = build_judge_prompt(JUDGE_REPS, 2)
    assert JUDGE_REPS["l1_base"] in b2.content_text
    assert JUDGE_REPS["l1_attention"] in b2.content_text
    assert JUDGE_REPS["l2_residual"] not in b2.content_text

    b3 = build_judge_prompt(JUDGE_REPS, 3)
    assert JUDGE_REPS["l2_base"] in b3.content_text
    assert JUDGE_REPS["l2_residual"] in b3.content_text

    for bundle in (b1, b2, b3):
        assert "ANSWER: <agree|disagree|unclear>" in bundle.instruction_text
    assert set(JUDGE_CATEGORIES) == {"agree", "disagree", "unclear"}


def test_judge_prompt_validates_rep_set():
    with pytest.raises(PromptError):
        build_judge_prompt({"l1_base": "x"}, 1)
    with pytest.raises(PromptError):
        build_judge_prompt(JUDGE_REPS, 4)


def test_denoise_prompt_directive():
    bundle = build_denoise_prompt("noisy text here")
    assert "extracting the key concept" in bundle.instruction_text
    assert bundle.content_text == "noisy text here"
    with pytest.raises(PromptError):
        build_denoise_prompt("")


def test_build_functions_are_deterministic():
    cfg = cfg_with(graph_attention=True, initial_residual=True)
    assert bundle_bytes(message_prompt(cfg)) == bundle_bytes(message_prompt(cfg))


def test_template_renderer_rejects_unknown_placeholder():
    with pytest.raises(PromptError, match="no value"):
        render_template("hello {{missing}}")


def test_unknown_domain_rejected():
    with pytest.raises(PromptError):
        load_pack("social")


@pytest.mark.parametrize("domain", ["citation", "co-purchase", "hyperlink"])
def test_golden_files_match(domain):
    golden_dir = TEMPLATE_ROOT / domain / "golden"
    for stem, artifact in golden_bundles(domain).items():
        expected = (golden_dir / f"{stem}.txt").read_text(encoding="utf-8")
        assert bundle_bytes(artifact) == expected, f"{domain}/{stem} drifted from golden file"


def test_common_golden_files_match():
    golden_dir = TEMPLATE_ROOT / "common" / "golden"
    for stem, artifact in common_golden_bundles().items():
        expected = (golden_dir / f"{stem}.txt").read_text(encoding="utf-8")
        assert bundle_bytes(artifact) == expected, f"common/{stem} drifted from golden file"
