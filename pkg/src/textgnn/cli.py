"""Operator CLI: validate bundles, encode, evaluate, judge, corrupt, sweep.

Configuration comes from a TOML run file (see README for the schema); CLI
flags override file values. Every artifact lands under --out with a fixed
layout: manifest.json plus reports/, records/, cache/ subdirectories, all
stamped with the run-configuration hash so mixed artifacts are detectable.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .cache import RepresentationCache
from .config import BackendSpec, ConfigError, RunConfig, load_run_config
from .encoder import EncodingAborted, encode, plan_receptive_field
from .evaluation import (
    ablation_table,
    build_classification_items,
    build_link_items,
    recompute_metric_from_jsonl,
    run_ablation_grid,
    run_link_prediction,
    run_node_classification,
    write_eval_report,
    write_grid_csv,
)
from .gateway import Gateway, GatewayError, HttpChatBackend, MockBackend, UsageLedger, usage_report
from .graph import GraphError, GraphLoadError, load_graph, load_labels
from .judge import run_judge_study, write_judge_study
from .sampling import SamplingError, sample_task_nodes, write_sample_manifest


class CliError(Exception):
    """Fatal operator-facing error; message printed, nonzero exit."""


def _build_backend(spec: BackendSpec):
    if spec.kind == "mock":
        return MockBackend(model_id=spec.model_id)
    return HttpChatBackend(
        base_url=spec.base_url, model_id=spec.model_id, api_key_env=spec.api_key_env
    )


def _build_gateway(spec: BackendSpec, config: RunConfig, ledger: UsageLedger) -> Gateway:
    if spec.kind == "http" and config.max_calls is None and config.max_total_tokens is None:
        raise CliError(
            "real backends require an explicit budget cap: set [budget] max_calls "
            "or max_total_tokens in the run config"
        )
    return Gateway(
        _build_backend(spec),
        ledger=ledger,
        requests_per_minute=spec.requests_per_minute,
        max_in_flight=spec.max_in_flight,
        max_calls=config.max_calls,
        max_total_tokens=config.max_total_tokens,
    )


def _out_dirs(config: RunConfig) -> Dict[str, Path]:
    out = Path(config.out_dir)
    dirs = {
        "out": out,
        "reports": out / "reports",
        "records": out / "records",
        "cache": Path(config.cache_dir) if config.cache_dir else out / "cache",
    }
    for p in dirs.values():
        p.mkdir(parents=True, exist_ok=True)
    return dirs


def _write_run_manifest(out: Path, config: RunConfig, command: str, status: str,
                        extra: Optional[Dict] = None) -> None:
    path = out / "manifest.json"
    doc = {}
    if path.is_file():
        doc = json.loads(path.read_text(encoding="utf-8"))
    doc.update(
        {"command": command, "run_config_hash": config.run_hash, "status": status}
    )
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _overrides_from_args(args: argparse.Namespace) -> Dict:
    keys = (
        "bundle", "domain_tag", "layers", "neighbor_k", "graph_attention",
        "initial_residual", "output_constraint", "variant", "seed",
        "task_kind", "n", "min_degree", "negatives", "dir", "cache_dir",
        "max_calls", "max_total_tokens",
    )
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = _overrides_from_args(args)
    if getattr(args, "out", None):
        overrides["dir"] = args.out
    if getattr(args, "task", None):
        overrides["task_kind"] = args.task
    return load_run_config(args.config, overrides)


def _load_targets(config: RunConfig, graph, targets_file: Optional[str]) -> List[str]:
    if targets_file:
        lines = Path(targets_file).read_text(encoding="utf-8").splitlines()
        targets = [ln.strip() for ln in lines if ln.strip()]
        if not targets:
            raise CliError(f"targets file {targets_file} is empty")
        return targets
    return sample_task_nodes(graph, config.task.n, config.task.min_degree, config.encoder.seed)


def cmd_validate_bundle(args: argparse.Namespace) -> int:
    graph = load_graph(args.bundle, args.domain_tag)
    print(f"bundle ok: {graph.num_nodes} nodes, {graph.num_edges} edges, domain {graph.domain_tag}")
    try:
        labels = load_labels(args.bundle)
        print(f"labels: {len(labels)} nodes, {len(set(labels.values()))} classes")
    except GraphLoadError:
        print("labels: none")
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dirs = _out_dirs(config)
    graph = load_graph(config.bundle, config.encoder.domain_tag)
    if not args.dry_run:
        # Validate backend/budget configuration before any sampling work.
        ledger = UsageLedger(dirs["records"] / "usage.jsonl")
        gateway = _build_gateway(config.encoder_backend, config, ledger)
    targets = _load_targets(config, graph, args.targets)

    if args.dry_run:
        cfg = config.encoder
        if cfg.variant == "direct":
            estimated = 0
            plan_sizes = {}
        elif cfg.variant == "all_in_one":
            estimated = len(targets)
            plan_sizes = {"1": len(targets)}
        else:
            plan = plan_receptive_field(graph, targets, cfg)
            estimated = plan.total_calls
            plan_sizes = {str(l): len(v) for l, v in plan.layer_sets.items()}
        print(f"dry run: {len(targets)} targets, plan sizes {plan_sizes}, "
              f"estimated calls {estimated}")
        return 0

    cache = RepresentationCache(dirs["cache"])
    manifest_path = dirs["out"] / "manifest.json"
    try:
        encode(graph, targets, config.encoder, gateway, cache, manifest_path=manifest_path)
    except EncodingAborted as exc:
        _write_run_manifest(dirs["out"], config, "encode", "aborted")
        print(f"encode aborted: {exc}", file=sys.stderr)
        print(f"resumable manifest: {manifest_path}")
        return 1
    _write_run_manifest(dirs["out"], config, "encode", "complete",
                        {"targets": len(targets)})
    summary = usage_report(ledger)
    print(f"encode complete: {summary.total_calls} new calls, "
          f"{summary.total_prompt_tokens} prompt tokens, "
          f"{summary.total_completion_tokens} completion tokens")
    return 0


def _task_gateway(config: RunConfig, ledger: UsageLedger) -> Optional[Gateway]:
    if config.task_backend is None:
        return None
    return _build_gateway(config.task_backend, config, ledger)


def _persist_samples(dirs: Dict[str, Path], seed: int, cls_items=None, link_items=None) -> None:
    """Record the sampled task items so a run can be re-scored without re-sampling."""
    path = dirs["records"] / "samples.jsonl"
    if cls_items is not None:
        write_sample_manifest(
            path, "task_nodes", seed, [[i.target, i.gold_label] for i in cls_items]
        )
    if link_items is not None:
        write_sample_manifest(
            path, "task_edges", seed,
            [[i.anchor, list(i.candidates), i.gold_index] for i in link_items],
        )


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dirs = _out_dirs(config)
    graph = load_graph(config.bundle, config.encoder.domain_tag)
    ledger = UsageLedger(dirs["records"] / "usage.jsonl")
    gateway = _build_gateway(config.encoder_backend, config, ledger)
    task_gw = _task_gateway(config, ledger)
    cache = RepresentationCache(dirs["cache"])
    seed = config.encoder.seed
    artifacts: List[str] = []

    if args.ablation:
        labels = load_labels(config.bundle)
        cls_items = build_classification_items(
            graph, labels, config.task.n, config.task.min_degree, seed
        )
        link_items = build_link_items(
            graph, config.task.n, config.task.min_degree, config.task.negatives, seed
        )
        _persist_samples(dirs, seed, cls_items=cls_items, link_items=link_items)
        rows = run_ablation_grid(
            graph, cls_items, link_items, config.encoder, gateway, cache,
            labels=labels, task_backend=task_gw,
        )
        csv_rows = [
            {
                "graph_attention": row.graph_attention,
                "initial_residual": row.initial_residual,
                "node_accuracy": f"{row.classification.metric:.6f}",
                "link_hit_ratio_at_1": f"{row.link.metric:.6f}",
            }
            for row in rows
        ]
        csv_path = write_grid_csv(csv_rows, dirs["reports"] / "ablation.csv", config.run_hash)
        table = ablation_table(rows)
        (dirs["reports"] / "ablation.txt").write_text(
            f"run_config_hash: {config.run_hash}\n{table}\n", encoding="utf-8"
        )
        for row in rows:
            for report in (row.classification, row.link):
                write_eval_report(report, dirs["out"], config.run_hash)
        print(table)
        artifacts.append(str(csv_path))
    elif config.task.kind == "node-classification":
        labels = load_labels(config.bundle)
        items = build_classification_items(
            graph, labels, config.task.n, config.task.min_degree, seed
        )
        _persist_samples(dirs, seed, cls_items=items)
        report = run_node_classification(
            graph, items, config.encoder, gateway, cache, labels=labels, task_backend=task_gw
        )
        paths = write_eval_report(report, dirs["out"], config.run_hash)
        print(f"accuracy: {report.metric:.4f} over {len(report.records)} items")
        artifacts.extend(str(p) for p in paths.values())
    else:
        items = build_link_items(
            graph, config.task.n, config.task.min_degree, config.task.negatives, seed
        )
        _persist_samples(dirs, seed, link_items=items)
        report = run_link_prediction(
            graph, items, config.encoder, gateway, cache, task_backend=task_gw
        )
        paths = write_eval_report(report, dirs["out"], config.run_hash)
        print(f"hit_ratio_at_1: {report.metric:.4f} over {len(report.records)} items")
        artifacts.extend(str(p) for p in paths.values())

    _write_run_manifest(dirs["out"], config, "eval", "complete", {"artifacts": artifacts})
    return 0


def cmd_judge(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dirs = _out_dirs(config)
    graph = load_graph(config.bundle, config.encoder.domain_tag)
    ledger = UsageLedger(dirs["records"] / "usage.jsonl")
    encode_gw = _build_gateway(config.encoder_backend, config, ledger)
    judge_spec = config.judge_backend or config.encoder_backend
    judge_gw = _build_gateway(judge_spec, config, ledger)
    cache = RepresentationCache(dirs["cache"])
    study = run_judge_study(
        graph, args.n, encode_gw, judge_gw, cache, config.encoder.seed,
        min_degree=args.judge_min_degree, neighbor_k=config.encoder.neighbor_k,
    )
    paths = write_judge_study(study, dirs["out"], config.run_hash)
    for obs, ratio in sorted(study.ratios().items()):
        shares = ", ".join(f"{cat}={ratio[cat]:.2f}" for cat in ("agree", "disagree", "unclear"))
        print(f"question {obs}: {shares}")
    _write_run_manifest(dirs["out"], config, "judge", "complete",
                        {"artifacts": [str(p) for p in paths.values()]})
    return 0


def cmd_corrupt(args: argparse.Namespace) -> int:
    """Neighborhood-corruption comparison: clean, corrupted w/o and w/ attention."""
    config = _load_config(args)
    dirs = _out_dirs(config)
    graph = load_graph(config.bundle, config.encoder.domain_tag)
    labels = load_labels(config.bundle)
    ledger = UsageLedger(dirs["records"] / "usage.jsonl")
    gateway = _build_gateway(config.encoder_backend, config, ledger)
    task_gw = _task_gateway(config, ledger)
    cache = RepresentationCache(dirs["cache"])
    seed = config.encoder.seed
    items = build_classification_items(graph, labels, config.task.n, config.task.min_degree, seed)

    # All three rows see the same neighbor budget; the corrupted rows fill
    # part of it with noise nodes.
    base = replace(config.encoder, variant="gln", neighbor_k=args.true_k + args.noise_k)
    rows = []
    settings = [
        ("orig", replace(base, graph_attention=True), None),
        ("corrupted_without_attention", replace(base, graph_attention=False),
         (args.true_k, args.noise_k)),
        ("corrupted_with_attention", replace(base, graph_attention=True),
         (args.true_k, args.noise_k)),
    ]
    for name, cfg, corruption in settings:
        report = run_node_classification(
            graph, items, cfg, gateway, cache,
            labels=labels, task_backend=task_gw, corrupt_neighbors=corruption,
        )
        write_eval_report(report, dirs["out"], config.run_hash)
        rows.append({"setting": name, "accuracy": f"{report.metric:.6f}"})
        print(f"{name}: accuracy {report.metric:.4f}")
    csv_path = write_grid_csv(rows, dirs["reports"] / "corruption.csv", config.run_hash)
    _write_run_manifest(dirs["out"], config, "corrupt", "complete",
                        {"artifacts": [str(csv_path)]})
    return 0


SWEEP_VALUES = {
    "neighbor_k": ("3", "5", "10"),
    "output_constraint": ("two_paragraphs", "three_sentences"),
}


def cmd_sweep(args: argparse.Namespace) -> int:
    """Parameter sweep with shared task items and per-row token accounting."""
    config = _load_config(args)
    dirs = _out_dirs(config)
    graph = load_graph(config.bundle, config.encoder.domain_tag)
    labels = load_labels(config.bundle)
    ledger = UsageLedger(dirs["records"] / "usage.jsonl")
    gateway = _build_gateway(config.encoder_backend, config, ledger)
    task_gw = _task_gateway(config, ledger)
    cache = RepresentationCache(dirs["cache"])
    seed = config.encoder.seed
    items = build_classification_items(graph, labels, config.task.n, config.task.min_degree, seed)

    param = args.param
    values = args.values.split(",") if args.values else list(SWEEP_VALUES[param])
    rows = []
    for value in values:
        if param == "neighbor_k":
            cfg = replace(config.encoder, neighbor_k=int(value))
        else:
            cfg = replace(config.encoder, output_constraint=value)
        report = run_node_classification(
            graph, items, cfg, gateway, cache, labels=labels, task_backend=task_gw
        )
        write_eval_report(report, dirs["out"], config.run_hash)
        enc = report.usage["encode"]
        calls = max(enc["calls"], 1)
        rows.append(
            {
                param: value,
                "config_hash": report.config_hash,
                "accuracy": f"{report.metric:.6f}",
                "mean_prompt_tokens": f"{enc['prompt_tokens'] / calls:.1f}",
                "mean_completion_tokens": f"{enc['completion_tokens'] / calls:.1f}",
            }
        )
        print(f"{param}={value}: accuracy {report.metric:.4f}, "
              f"mean prompt tokens {rows[-1]['mean_prompt_tokens']}")
    csv_path = write_grid_csv(rows, dirs["reports"] / f"sweep_{param}.csv", config.run_hash)
    _write_run_manifest(dirs["out"], config, "sweep", "complete",
                        {"artifacts": [str(csv_path)]})
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    """Re-render and verify reports from persisted records."""
    out = Path(args.out)
    reports_dir = out / "reports"
    records_dir = out / "records"
    if not reports_dir.is_dir():
        raise CliError(f"no reports directory under {out}")
    hashes = set()
    for report_path in sorted(reports_dir.glob("*.json")):
        doc = json.loads(report_path.read_text(encoding="utf-8"))
        if "run_config_hash" in doc:
            hashes.add(doc["run_config_hash"])
        if "metric" not in doc:
            continue
        stem = report_path.stem
        records_path = records_dir / f"{stem}.jsonl"
        line = f"{stem}: metric {doc['metric']:.4f} over {doc['items']} items"
        if records_path.is_file():
            recomputed, total = recompute_metric_from_jsonl(records_path)
            if recomputed != doc["metric"] or total != doc["items"]:
                raise CliError(f"{stem}: records disagree with the report "
                               f"({recomputed:.6f}/{total} vs {doc['metric']:.6f}/{doc['items']})")
            line += " [verified]"
        print(line)
    if len(hashes) > 1:
        raise CliError(
            f"mixed artifacts: multiple run_config_hash values {sorted(hashes)}; "
            "use one output directory per run (share representations via [output] cache_dir)"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textgnn")
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate-bundle", help="check a graph bundle directory")
    validate.add_argument("bundle")
    validate.add_argument("--domain-tag", dest="domain_tag")
    validate.set_defaults(func=cmd_validate_bundle)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--bundle")
        p.add_argument("--domain-tag", dest="domain_tag")
        p.add_argument("--layers", type=int)
        p.add_argument("--neighbor-k", dest="neighbor_k", type=int)
        p.add_argument("--variant")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-constraint", dest="output_constraint")
        p.add_argument("--graph-attention", dest="graph_attention",
                       action=argparse.BooleanOptionalAction)
        p.add_argument("--initial-residual", dest="initial_residual",
                       action=argparse.BooleanOptionalAction)
        p.add_argument("--n", type=int)
        p.add_argument("--min-degree", dest="min_degree", type=int)
        p.add_argument("--negatives", type=int)
        p.add_argument("--max-calls", dest="max_calls", type=int)
        p.add_argument("--max-total-tokens", dest="max_total_tokens", type=int)

    enc = sub.add_parser("encode", help="populate the representation cache")
    add_common(enc)
    enc.add_argument("--targets", help="file with one target node id per line")
    enc.add_argument("--dry-run", action="store_true")
    enc.set_defaults(func=cmd_encode)

    ev = sub.add_parser("eval", help="run a downstream task end to end")
    add_common(ev)
    ev.add_argument("--task", choices=["node-classification", "link-prediction"])
    ev.add_argument("--ablation", action="store_true",
                    help="run both tasks over the attention x residual grid")
    ev.set_defaults(func=cmd_eval)

    jg = sub.add_parser("judge", help="run the representation-quality judge study")
    add_common(jg)
    jg.add_argument("--judge-n", dest="n", type=int, default=None)
    jg.add_argument("--judge-min-degree", dest="judge_min_degree", type=int, default=1)
    jg.set_defaults(func=cmd_judge)

    co = sub.add_parser("corrupt", help="neighborhood-corruption comparison")
    add_common(co)
    co.add_argument("--true-k", dest="true_k", type=int, default=7)
    co.add_argument("--noise-k", dest="noise_k", type=int, default=3)
    co.set_defaults(func=cmd_corrupt)

    sw = sub.add_parser("sweep", help="parameter sweep with token accounting")
    add_common(sw)
    sw.add_argument("--param", choices=sorted(SWEEP_VALUES), required=True)
    sw.add_argument("--values", help="comma-separated override of sweep values")
    sw.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="verify and print reports from an output dir")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", "") == "judge" and args.n is None:
        args.n = 100
    try:
        return args.func(args)
    except (CliError, ConfigError, GraphError, SamplingError, GatewayError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
