"""Encoding regimes and run configuration.

An EncoderConfig pins every knob that can change the text a node ends up
with: layer count, neighbor sample size, the prompt variant and its clause
toggles, the output-length constraint, and the sampling seed. Its canonical
serialization hashes into the key that isolates cached representations.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional

from .graph import DOMAIN_TAGS

VARIANTS = ("gln", "gln_base", "all_in_one", "promptgfm", "direct")
OUTPUT_CONSTRAINTS = ("two_paragraphs", "three_sentences")
GA_PHRASES = ("default", "alternative")
IRC_STYLES = ("itemized", "plain_text")


class ConfigError(ValueError):
    """An invalid or inconsistent configuration value."""


@dataclass(frozen=True)
class EncoderConfig:
    domain_tag: str
    layers: int = 2
    neighbor_k: int = 10
    graph_attention: bool = False
    initial_residual: bool = False
    output_constraint: str = "two_paragraphs"
    variant: str = "gln"
    seed: int = 0
    ga_phrase: str = "default"
    irc_style: str = "itemized"

    def __post_init__(self) -> None:
        if self.domain_tag not in DOMAIN_TAGS:
            raise ConfigError(f"unknown domain_tag {self.domain_tag!r}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.neighbor_k < 1:
            raise ConfigError("neighbor_k must be >= 1")
        if self.output_constraint not in OUTPUT_CONSTRAINTS:
            raise ConfigError(f"unknown output_constraint {self.output_constraint!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.ga_phrase not in GA_PHRASES:
            raise ConfigError(f"unknown ga_phrase {self.ga_phrase!r}")
        if self.irc_style not in IRC_STYLES:
            raise ConfigError(f"unknown irc_style {self.irc_style!r}")
        if self.variant == "gln_base" and (self.graph_attention or self.initial_residual):
            raise ConfigError("gln_base forbids graph_attention and initial_residual")

    def canonical_string(self) -> str:
        from .prompts import TEMPLATE_PACK_VERSION

        payload = {
            "domain_tag": self.domain_tag,
            "layers": self.layers,
            "neighbor_k": self.neighbor_k,
            "graph_attention": self.graph_attention,
            "initial_residual": self.initial_residual,
            "output_constraint": self.output_constraint,
            "variant": self.variant,
            "seed": self.seed,
            "ga_phrase": self.ga_phrase,
            "irc_style": self.irc_style,
            "template_pack": TEMPLATE_PACK_VERSION,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_string().encode("utf-8")).hexdigest()[:16]

    def with_flags(self, graph_attention: bool, initial_residual: bool) -> "EncoderConfig":
        """Ablation helper: same regime with the two prompt toggles replaced."""
        return replace(self, graph_attention=graph_attention, initial_residual=initial_residual)


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "mock"  # mock | http
    model_id: str = "mock"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    requests_per_minute: Optional[float] = None
    max_in_flight: int = 8

    def __post_init__(self) -> None:
        if self.kind not in ("mock", "http"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "node-classification"  # node-classification | link-prediction
    n: int = 1000
    min_degree: int = 10
    negatives: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ("node-classification", "link-prediction"):
            raise ConfigError(f"unknown task kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs; its hash stamps every artifact."""

    bundle: str
    encoder: EncoderConfig
    task: TaskSpec = TaskSpec()
    encoder_backend: BackendSpec = BackendSpec()
    task_backend: Optional[BackendSpec] = None
    judge_backend: Optional[BackendSpec] = None
    cache_dir: str = ""
    out_dir: str = "out"
    max_calls: Optional[int] = None
    max_total_tokens: Optional[int] = None

    def canonical_string(self) -> str:
        def spec_dict(spec: Optional[BackendSpec]) -> Optional[Dict]:
            if spec is None:
                return None
            return {
                "kind": spec.kind,
                "model_id": spec.model_id,
                "base_url": spec.base_url,
                "api_key_env": spec.api_key_env,
            }

        payload = {
            "bundle": self.bundle,
            "encoder": json.loads(self.encoder.canonical_string()),
            "task": {
                "kind": self.task.kind,
                "n": self.task.n,
                "min_degree": self.task.min_degree,
                "negatives": self.task.negatives,
            },
            "encoder_backend": spec_dict(self.encoder_backend),
            "task_backend": spec_dict(self.task_backend),
            "judge_backend": spec_dict(self.judge_backend),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @property
    def run_hash(self) -> str:
        return hashlib.sha256(self.canonical_string().encode("utf-8")).hexdigest()[:16]


def _load_toml(path: Path) -> Dict:
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with path.open("rb") as fh:
        return tomllib.load(fh)


def load_run_config(path: str | Path, overrides: Optional[Dict] = None) -> RunConfig:
    """Read a TOML run file; flat ``overrides`` (e.g. CLI flags) win over it.

    Sections: [graph], [encoder], [task], [backends.encoder], [backends.task],
    [backends.judge], [budget], [output]. Any omitted key takes its default.
    """
    doc = _load_toml(Path(path))
    overrides = dict(overrides or {})

    graph_sec = doc.get("graph", {})
    enc_sec = dict(doc.get("encoder", {}))
    task_sec = dict(doc.get("task", {}))
    backends = doc.get("backends", {})
    budget = doc.get("budget", {})
    output = doc.get("output", {})

    def take(section: Dict, key: str, default):
        if key in overrides and overrides[key] is not None:
            return overrides[key]
        return section.get(key, default)

    bundle = take(graph_sec, "bundle", "")
    if not bundle:
        raise ConfigError("graph.bundle is required")
    domain_tag = take(graph_sec, "domain_tag", None)

    encoder = EncoderConfig(
        domain_tag=domain_tag if domain_tag else enc_sec.get("domain_tag", "citation"),
        layers=int(take(enc_sec, "layers", 2)),
        neighbor_k=int(take(enc_sec, "neighbor_k", 10)),
        graph_attention=bool(take(enc_sec, "graph_attention", False)),
        initial_residual=bool(take(enc_sec, "initial_residual", False)),
        output_constraint=take(enc_sec, "output_constraint", "two_paragraphs"),
        variant=take(enc_sec, "variant", "gln"),
        seed=int(take(enc_sec, "seed", 0)),
        ga_phrase=take(enc_sec, "ga_phrase", "default"),
        irc_style=take(enc_sec, "irc_style", "itemized"),
    )

    task = TaskSpec(
        kind=take(task_sec, "task_kind", task_sec.get("kind", "node-classification")),
        n=int(take(task_sec, "n", 1000)),
        min_degree=int(take(task_sec, "min_degree", 10)),
        negatives=int(take(task_sec, "negatives", 4)),
    )

    def backend_spec(name: str) -> Optional[BackendSpec]:
        sec = backends.get(name)
        if sec is None:
            return None
        return BackendSpec(
            kind=sec.get("kind", sec.get("backend", "mock")),
            model_id=sec.get("model_id", "mock"),
            base_url=sec.get("base_url", "https://api.openai.com/v1"),
            api_key_env=sec.get("api_key_env", "OPENAI_API_KEY"),
            requests_per_minute=sec.get("requests_per_minute"),
            max_in_flight=int(sec.get("max_in_flight", 8)),
        )

    encoder_backend = backend_spec("encoder") or BackendSpec()
    max_calls = take(budget, "max_calls", None)
    max_total_tokens = take(budget, "max_total_tokens", None)

    return RunConfig(
        bundle=str(bundle),
        encoder=encoder,
        task=task,
        encoder_backend=encoder_backend,
        task_backend=backend_spec("task"),
        judge_backend=backend_spec("judge"),
        cache_dir=str(take(output, "cache_dir", "")),
        out_dir=str(take(output, "dir", "out")),
        max_calls=int(max_calls) if max_calls else None,
        max_total_tokens=int(max_total_tokens) if max_total_tokens else None,
    )
