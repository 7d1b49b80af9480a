"""Layered refinement: plan receptive fields, drive the gateway, reuse the cache.

Encoding is demand-driven: the plan expands each target's sampled
neighborhood bottom-up, so only representations the targets actually need
are computed. Neighbor samples are drawn once per (node, seed) and reused at
every layer, which fixes the computation graph and maximizes cache hits.

Cache entries are keyed by an *encoding key* that digests the encoder
configuration together with the graph's content fingerprint (and any extra
mode qualifiers such as neighborhood corruption), so differently configured
runs, or runs on structurally different graphs, can never collide.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .cache import CacheEntry, RepresentationCache
from .config import EncoderConfig
from .gateway import (
    BudgetExceededError,
    CompletionRequest,
    Gateway,
    GatewayError,
    as_gateway,
)
from .graph import NodeId, TextGraph, UnknownNodeError
from .prompts import (
    ALL_IN_ONE_ONE_HOP_CAP,
    ALL_IN_ONE_TWO_HOP_CAP,
    TEMPLATE_PACK_VERSION,
    build_all_in_one_prompt,
    build_denoise_prompt,
    build_message_prompt,
    build_promptgfm_prompt,
)
from .sampling import corrupt_neighborhood, sample_neighbors, sample_two_hop

logger = logging.getLogger(__name__)

MESSAGE_PASSING_VARIANTS = ("gln", "gln_base", "promptgfm")


class EncoderError(Exception):
    """Base class for encoding failures."""


class EncodingAborted(EncoderError):
    """The run stopped early; a manifest records what remains."""

    def __init__(self, message: str, manifest_path: Optional[Path] = None) -> None:
        super().__init__(message)
        self.manifest_path = manifest_path


@dataclass(frozen=True)
class LayeredRepresentation:
    """Per-node text at every layer 0..L under one encoding key."""

    node: NodeId
    texts: Mapping[int, str]
    config_hash: str

    def __post_init__(self) -> None:
        top = max(self.texts)
        missing = [t for t in range(top + 1) if t not in self.texts]
        if missing:
            raise EncoderError(f"layered texts for {self.node!r} missing layer(s) {missing}")

    @property
    def layers(self) -> int:
        return max(self.texts)

    def final_layers(self) -> Dict[int, str]:
        """The refined layers (1..L), as consumed by the composite renderer."""
        return {t: text for t, text in self.texts.items() if t >= 1}


@dataclass(frozen=True)
class EncodePlan:
    """Which (node, layer) representations a run must produce."""

    targets: Tuple[NodeId, ...]
    layer_sets: Mapping[int, Tuple[NodeId, ...]]
    neighbor_samples: Mapping[NodeId, Tuple[NodeId, ...]]

    @property
    def total_calls(self) -> int:
        return sum(len(nodes) for nodes in self.layer_sets.values())

    def required_keys(self) -> List[Tuple[NodeId, int]]:
        keys = []
        for layer in sorted(self.layer_sets):
            keys.extend((node, layer) for node in self.layer_sets[layer])
        return keys


def encoding_key(cfg: EncoderConfig, graph: TextGraph, extras: Optional[Mapping] = None) -> str:
    """Cache shard key: configuration digest bound to this exact graph."""
    material = "|".join(
        [cfg.canonical_string(), graph.fingerprint(), json.dumps(extras or {}, sort_keys=True)]
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


def plan_receptive_field(
    graph: TextGraph,
    targets: Sequence[NodeId],
    cfg: EncoderConfig,
    neighbor_overrides: Optional[Mapping[NodeId, Sequence[NodeId]]] = None,
) -> EncodePlan:
    """Expand targets bottom-up into per-layer requirement sets.

    The layer-L set is the targets; each lower layer adds the sampled
    neighbors of everything above it, since a node's layer-l text is built
    from layer-(l-1) texts of itself and its sampled neighbors.
    """
    for t in targets:
        if t not in graph:
            raise UnknownNodeError(f"unknown target {t!r}")
    overrides = dict(neighbor_overrides or {})
    samples: Dict[NodeId, Tuple[NodeId, ...]] = {}

    def sampled(node: NodeId) -> Tuple[NodeId, ...]:
        if node not in samples:
            if node in overrides:
                samples[node] = tuple(overrides[node])
            else:
                samples[node] = tuple(sample_neighbors(graph, node, cfg.neighbor_k, cfg.seed))
        return samples[node]

    layer_sets: Dict[int, Tuple[NodeId, ...]] = {}
    current = sorted(set(targets))
    for layer in range(cfg.layers, 0, -1):
        layer_sets[layer] = tuple(current)
        below = set(current)
        for node in current:
            below.update(sampled(node))
        current = sorted(below)
    return EncodePlan(targets=tuple(targets), layer_sets=layer_sets, neighbor_samples=samples)


def _write_manifest(
    path: Optional[Path],
    *,
    cfg: EncoderConfig,
    key: str,
    plan: Optional[EncodePlan],
    status: str,
    remaining: Sequence[Tuple[NodeId, int]] = (),
    calls_issued: int = 0,
) -> None:
    if path is None:
        return
    doc = {
        "kind": "encode",
        "status": status,
        "config_hash": cfg.config_hash,
        "encoding_key": key,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "plan_sizes": {str(l): len(nodes) for l, nodes in (plan.layer_sets.items() if plan else {})},
        "targets": list(plan.targets) if plan else [],
        "calls_issued": calls_issued,
        "remaining": [{"node": n, "layer": l} for n, l in remaining],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prev_text(
    graph: TextGraph, cache: RepresentationCache, key: str, node: NodeId, layer: int
) -> str:
    if layer == 0:
        return graph.text(node)
    entry = cache.get(key, node, layer)
    if entry is None:
        raise EncoderError(f"missing layer-{layer} text for {node!r} (plan violation)")
    return entry.text


def encode(
    graph: TextGraph,
    targets: Sequence[NodeId],
    cfg: EncoderConfig,
    backend,
    cache: RepresentationCache,
    *,
    max_output_tokens: int = 1024,
    manifest_path: Optional[str | Path] = None,
    workers: int = 1,
    neighbor_overrides: Optional[Mapping[NodeId, Sequence[NodeId]]] = None,
    key_extras: Optional[Mapping] = None,
) -> Dict[NodeId, LayeredRepresentation]:
    """Produce complete layered representations for every target.

    Dispatches on the configured variant: message-passing variants run the
    layer-by-layer plan, the single-prompt baseline issues one call per
    target, and the identity baseline issues none. Whatever is already in
    the cache is reused; a repeat call with identical inputs is free.
    """
    gateway = as_gateway(backend)
    manifest = Path(manifest_path) if manifest_path else None
    targets = list(targets)
    for t in targets:
        if t not in graph:
            raise UnknownNodeError(f"unknown target {t!r}")

    if cfg.variant == "direct":
        key = encoding_key(cfg, graph, key_extras)
        return {
            t: LayeredRepresentation(t, {0: graph.text(t)}, config_hash=key) for t in targets
        }
    if cfg.variant == "all_in_one":
        key = encoding_key(cfg, graph, key_extras)
        try:
            return _encode_all_in_one(graph, targets, cfg, gateway, cache,
                                      max_output_tokens, key_extras)
        except (BudgetExceededError, GatewayError) as exc:
            remaining = [(t, 1) for t in targets if cache.get(key, t, 1) is None]
            _write_manifest(manifest, cfg=cfg, key=key, plan=None, status="aborted",
                            remaining=remaining)
            raise EncodingAborted(f"encoding aborted: {exc}", manifest_path=manifest) from exc
    if cfg.variant not in MESSAGE_PASSING_VARIANTS:
        raise EncoderError(f"variant {cfg.variant!r} cannot be encoded")

    key = encoding_key(cfg, graph, key_extras)
    plan = plan_receptive_field(graph, targets, cfg, neighbor_overrides)
    _write_manifest(manifest, cfg=cfg, key=key, plan=plan, status="running")
    markers = gateway.supports_source_markers
    calls_before = gateway.calls_completed

    def encode_one(node: NodeId, layer: int) -> None:
        if cache.get(key, node, layer) is not None:
            return
        neighbors = plan.neighbor_samples[node]
        prev = _prev_text(graph, cache, key, node, layer - 1)
        if not neighbors:
            # Isolated node: carry the previous layer forward without a call.
            cache.put(key, CacheEntry(node=node, layer=layer, text=prev))
            return
        neighbor_reps = [(nb, _prev_text(graph, cache, key, nb, layer - 1)) for nb in neighbors]
        if cfg.variant == "promptgfm":
            bundle = build_promptgfm_prompt(
                prev, neighbor_reps, cfg, layer, target_id=node, inject_markers=markers
            )
        else:
            initials = {nb: graph.text(nb) for nb in neighbors}
            bundle = build_message_prompt(
                prev,
                graph.text(node),
                neighbor_reps,
                cfg,
                layer,
                target_id=node,
                neighbor_initials=initials,
                inject_markers=markers,
            )
        resp = gateway.complete(
            CompletionRequest(
                instruction_text=bundle.instruction_text,
                content_text=bundle.content_text,
                model_id=getattr(gateway.backend, "model_id", "unknown"),
                max_output_tokens=max_output_tokens,
                request_tag=f"encode/{key}/{layer}/{node}",
            )
        )
        cache.put(
            key,
            CacheEntry(
                node=node,
                layer=layer,
                text=resp.text,
                prompt_tokens=resp.prompt_tokens,
                completion_tokens=resp.completion_tokens,
            ),
        )

    done: set = set()
    try:
        for layer in sorted(plan.layer_sets):
            nodes = plan.layer_sets[layer]
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    # Strict layer barrier: list() drains every future before
                    # the next layer starts.
                    list(pool.map(lambda n: encode_one(n, layer), nodes))
            else:
                for node in nodes:
                    encode_one(node, layer)
            done.update((n, layer) for n in nodes)
    except (BudgetExceededError, GatewayError) as exc:
        remaining = [k for k in plan.required_keys() if k not in done and cache.get(key, *k) is None]
        _write_manifest(
            manifest,
            cfg=cfg,
            key=key,
            plan=plan,
            status="aborted",
            remaining=remaining,
            calls_issued=gateway.calls_completed - calls_before,
        )
        raise EncodingAborted(f"encoding aborted: {exc}", manifest_path=manifest) from exc

    _write_manifest(
        manifest,
        cfg=cfg,
        key=key,
        plan=plan,
        status="complete",
        calls_issued=gateway.calls_completed - calls_before,
    )
    out: Dict[NodeId, LayeredRepresentation] = {}
    for t in targets:
        texts = {0: graph.text(t)}
        for layer in range(1, cfg.layers + 1):
            texts[layer] = _prev_text(graph, cache, key, t, layer)
        out[t] = LayeredRepresentation(t, texts, config_hash=key)
    return out


def _encode_all_in_one(
    graph: TextGraph,
    targets: List[NodeId],
    cfg: EncoderConfig,
    gateway: Gateway,
    cache: RepresentationCache,
    max_output_tokens: int,
    key_extras: Optional[Mapping],
) -> Dict[NodeId, LayeredRepresentation]:
    key = encoding_key(cfg, graph, key_extras)
    markers = gateway.supports_source_markers
    out: Dict[NodeId, LayeredRepresentation] = {}
    for node in targets:
        entry = cache.get(key, node, 1)
        if entry is None:
            one_hop, two_hop = sample_two_hop(
                graph, node, ALL_IN_ONE_ONE_HOP_CAP, ALL_IN_ONE_TWO_HOP_CAP, cfg.seed
            )
            bundle = build_all_in_one_prompt(
                graph.text(node),
                [(nb, graph.text(nb)) for nb in one_hop],
                [(nb, graph.text(nb)) for nb in two_hop],
                cfg,
                target_id=node,
                inject_markers=markers,
            )
            resp = gateway.complete(
                CompletionRequest(
                    instruction_text=bundle.instruction_text,
                    content_text=bundle.content_text,
                    model_id=getattr(gateway.backend, "model_id", "unknown"),
                    max_output_tokens=max_output_tokens,
                    request_tag=f"encode/{key}/1/{node}",
                )
            )
            entry = CacheEntry(
                node=node,
                layer=1,
                text=resp.text,
                prompt_tokens=resp.prompt_tokens,
                completion_tokens=resp.completion_tokens,
            )
            cache.put(key, entry)
        out[node] = LayeredRepresentation(node, {0: graph.text(node), 1: entry.text}, config_hash=key)
    return out


def corruption_key_extras(cfg: EncoderConfig, true_k: int, noise_k: int) -> Optional[Mapping]:
    """Cache-key qualifier for corrupted-neighborhood encoding.

    With no noise and a matching sample size the corruption degenerates to
    plain encoding, so sharing the clean key is safe (and free); any other
    shape changes prompts and must be isolated.
    """
    if noise_k == 0 and true_k == cfg.neighbor_k:
        return None
    return {"corrupt_neighborhood": [true_k, noise_k]}


def encode_corrupted(
    graph: TextGraph,
    targets: Sequence[NodeId],
    cfg: EncoderConfig,
    backend,
    cache: RepresentationCache,
    true_k: int,
    noise_k: int,
    *,
    max_output_tokens: int = 1024,
    manifest_path: Optional[str | Path] = None,
    workers: int = 1,
) -> Dict[NodeId, LayeredRepresentation]:
    """Encode with each target's neighbor list replaced by a corrupted one.

    The corrupted list mixes true_k genuine neighbors with noise_k random
    non-neighbors; non-target nodes keep ordinary sampling. Results live
    under a distinct encoding key so they never mix with clean runs.
    """
    overrides = {
        t: corrupt_neighborhood(graph, t, true_k, noise_k, cfg.seed) for t in targets
    }
    extras = corruption_key_extras(cfg, true_k, noise_k)
    return encode(
        graph,
        targets,
        cfg,
        backend,
        cache,
        max_output_tokens=max_output_tokens,
        manifest_path=manifest_path,
        workers=workers,
        neighbor_overrides=overrides,
        key_extras=extras,
    )


def denoise_attributes(
    graph: TextGraph,
    backend,
    cache: RepresentationCache,
    *,
    max_output_tokens: int = 1024,
) -> TextGraph:
    """Replace every node's text with the backend's key-concept extraction."""
    gateway = as_gateway(backend)
    model_id = getattr(gateway.backend, "model_id", "unknown")
    material = f"denoise|{TEMPLATE_PACK_VERSION}|{model_id}|{graph.fingerprint()}"
    key = hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]
    texts: Dict[NodeId, str] = {}
    for node in graph.nodes:
        entry = cache.get(key, node, 0)
        if entry is None:
            bundle = build_denoise_prompt(graph.text(node))
            resp = gateway.complete(
                CompletionRequest(
                    instruction_text=bundle.instruction_text,
                    content_text=bundle.content_text,
                    model_id=model_id,
                    max_output_tokens=max_output_tokens,
                    request_tag=f"denoise/{key}/{node}",
                )
            )
            entry = CacheEntry(
                node=node,
                layer=0,
                text=resp.text,
                prompt_tokens=resp.prompt_tokens,
                completion_tokens=resp.completion_tokens,
            )
            cache.put(key, entry)
        texts[node] = entry.text
    return graph.with_texts(texts)
