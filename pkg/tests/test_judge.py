"""Judge study: ratios, call accounting, provenance, failure handling."""

from __future__ import annotations

import json

import pytest

from textgnn.cache import RepresentationCache
from textgnn.encoder import encoding_key
from textgnn.gateway import MockBackend
from textgnn.judge import run_judge_study, study_configs, write_judge_study

from conftest import ScriptedBackend, ring_graph


def test_stub_always_agree_gives_unit_ratio(tmp_path):
    g = ring_graph(30, width=2)
    cache = RepresentationCache(tmp_path / "cache")
    study = run_judge_study(
        g, 10, MockBackend(), ScriptedBackend("ANSWER: agree"), cache, seed=3, neighbor_k=3
    )
    for obs, ratio in study.ratios().items():
        assert ratio == {"agree": 1.0, "disagree": 0.0, "unclear": 0.0}
    assert study.judge_calls == 30


def test_cycling_stub_thirds_per_question(tmp_path):
    g = ring_graph(40, width=2)
    cache = RepresentationCache(tmp_path / "cache")
    stub = ScriptedBackend(["ANSWER: agree", "ANSWER: disagree", "ANSWER: unclear"])
    study = run_judge_study(g, 9, MockBackend(), stub, cache, seed=3, neighbor_k=3)
    for obs, ratio in study.ratios().items():
        assert ratio["agree"] == pytest.approx(1 / 3)
        assert ratio["disagree"] == pytest.approx(1 / 3)
        assert ratio["unclear"] == pytest.approx(1 / 3)
    assert study.judge_calls == 27


def test_ratios_recompute_from_records(tmp_path):
    g = ring_graph(30, width=2)
    cache = RepresentationCache(tmp_path / "cache")
    stub = ScriptedBackend(["ANSWER: agree", "ANSWER: agree", "ANSWER: disagree"])
    study = run_judge_study(g, 6, MockBackend(), stub, cache, seed=5, neighbor_k=3)
    for obs in (1, 2, 3):
        recs = [r for r in study.records if r.observation == obs and r.category]
        for cat in ("agree", "disagree", "unclear"):
            expected = sum(1 for r in recs if r.category == cat) / len(recs)
            assert study.ratios()[obs][cat] == pytest.approx(expected)


def test_parse_failure_excluded_from_denominator(tmp_path):
    g = ring_graph(30, width=2)
    cache = RepresentationCache(tmp_path / "cache")

    class OneBadApple(ScriptedBackend):
        def __init__(self):
            super().__init__("ANSWER: agree")
            self.n = 0

        def send(self, req):
            self.n += 1
            if self.n in (1, 2):  # first judgement fails both attempts
                self._texts = ["no contract line"]
            else:
                self._texts = ["ANSWER: agree"]
            return super().send(req)

    study = run_judge_study(g, 4, MockBackend(), OneBadApple(), cache, seed=7, neighbor_k=3)
    failed = study.failed_records()
    assert len(failed) == 1
    assert failed[0].observation == 1
    tallies = study.tallies()
    assert sum(tallies[1].values()) == 3  # one node dropped from question 1
    assert sum(tallies[2].values()) == 4
    assert study.ratios()[1]["agree"] == 1.0


def test_provenance_cache_keys(tmp_path):
    g = ring_graph(30, width=2)
    cache = RepresentationCache(tmp_path / "cache")
    study = run_judge_study(
        g, 5, MockBackend(), ScriptedBackend("ANSWER: agree"), cache, seed=9, neighbor_k=3
    )
    configs = study_configs(g.domain_tag, seed=9, neighbor_k=3)
    base_key = encoding_key(configs["base"], g)
    att_key = encoding_key(configs["attention"], g)
    res_key = encoding_key(configs["residual"], g)
    for node in study.nodes:
        assert cache.get(base_key, node, 1) is not None
        assert cache.get(base_key, node, 2) is not None
        assert cache.get(att_key, node, 1) is not None
        assert cache.get(res_key, node, 2) is not None


def test_study_deterministic_under_mock_and_cached_replay(tmp_path):
    g = ring_graph(30, width=2)
    cache = RepresentationCache(tmp_path / "cache")
    stub = ScriptedBackend(["ANSWER: agree", "ANSWER: disagree", "ANSWER: unclear"])
    first = run_judge_study(g, 6, MockBackend(), stub, cache, seed=11, neighbor_k=3)
    # Replay with a stub that would answer differently: cache wins.
    second = run_judge_study(
        g, 6, MockBackend(), ScriptedBackend("ANSWER: unclear"), cache, seed=11, neighbor_k=3
    )
    assert first.to_json_dict() == second.to_json_dict()


def test_write_study_outputs(tmp_path):
    g = ring_graph(30, width=2)
    cache = RepresentationCache(tmp_path / "cache")
    study = run_judge_study(
        g, 4, MockBackend(), ScriptedBackend("ANSWER: agree"), cache, seed=13, neighbor_k=3
    )
    paths = write_judge_study(study, tmp_path / "out", run_hash="abc123")
    doc = json.loads(paths["json"].read_text(encoding="utf-8"))
    assert doc["run_config_hash"] == "abc123"
    assert doc["judge_calls"] == 12
    csv_lines = paths["csv"].read_text(encoding="utf-8").strip().splitlines()
    assert csv_lines[0] == "question,category,ratio"
    assert len(csv_lines) == 1 + 9  # 3 questions x 3 categories
