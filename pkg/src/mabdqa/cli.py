"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from .bandit import write_trace
from .config import AppConfig, ConfigError, load_config, override
from .embedding import (
    ContractError,
    EmbeddingIndex,
    IndexFileError,
    PageRecord,
    attach_manifest,
    export_similarity_map,
    load_index,
    load_manifest,
    save_index,
)
from .gateway import (
    GatewayConfigError,
    GatewayError,
    MockEmbedder,
    MockGateway,
    OpenAIGateway,
    grade_answer,
    load_mock_script,
)
from .hypergraph import build_page_graph, load_page_graph, save_page_graph
from .metrics import load_dataset, run_benchmark, write_report
from .pipeline import Engine
from .synth import SyntheticCorpusSpec, compare_methods, load_spec, write_comparison

logger = logging.getLogger("mabdqa")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _config(args) -> AppConfig:
    cfg = load_config(args.config, env_gateway=not args.mock)
    if args.seed is not None:
        override(cfg, "retrieval", seed=args.seed)
    if getattr(args, "mock_script", None):
        override(cfg, "paths", mock_script=args.mock_script)
    override(
        cfg,
        "retrieval",
        alpha_mix=getattr(args, "alpha", None),
        beta_mix=getattr(args, "beta", None),
        lambda_mix=getattr(args, "lam", None),
        budget=getattr(args, "m", None),
        output_k=getattr(args, "k", None),
    )
    override(cfg, "graph", theta_g=getattr(args, "theta_g", None), theta_h=getattr(args, "theta_h", None))
    override(
        cfg,
        "reasoner",
        max_rounds=getattr(args, "max_rounds", None),
        subgraph_cap=getattr(args, "subgraph_cap", None),
    )
    return cfg


def _gateway(cfg: AppConfig, args, dim: Optional[int] = None):
    """Mock gateway under --mock, otherwise the HTTP client."""
    if args.mock:
        rules = load_mock_script(cfg.paths.mock_script) if cfg.paths.mock_script else ()
        d = dim or cfg.mock_dim
        return MockGateway(rules, seed=cfg.retrieval.seed, dim=d, embedder=MockEmbedder(d, cfg.embed_seed))
    return OpenAIGateway(cfg.gateway)


def _path(value, fallback, what: str) -> str:
    p = value or fallback
    if not p:
        raise UsageError(f"no {what} given (flag or [paths] in the config)")
    return p


def _load_index(args, cfg: AppConfig) -> EmbeddingIndex:
    index = load_index(_path(getattr(args, "index", None), cfg.paths.index, "index"))
    manifest = getattr(args, "manifest", None) or cfg.paths.manifest
    if manifest:
        attach_manifest(index, load_manifest(manifest))
    return index


def _engine(args, cfg: AppConfig, index: EmbeddingIndex) -> Engine:
    graph = None
    graph_path = getattr(args, "graph", None) or cfg.paths.graph
    if graph_path and Path(graph_path).exists():
        graph = load_page_graph(graph_path, index)
        if graph.theta_g != cfg.graph.theta_g:
            logger.info("cached graph has theta_g=%s, rebuilding for %s", graph.theta_g, cfg.graph.theta_g)
            graph = None
    return Engine(
        index,
        _gateway(cfg, args, index.dim),
        retrieval=cfg.retrieval,
        reasoner=cfg.reasoner,
        theta_g=cfg.graph.theta_g,
        theta_h=cfg.graph.theta_h,
        page_graph=graph,
    )


def _emit(args, doc: dict, lines: Sequence[str]) -> None:
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg: AppConfig) -> int:
    pages = load_manifest(args.manifest)
    if not pages:
        raise ContractError("manifest lists no pages")
    gw = _gateway(cfg, args)
    embs = gw.embed(pages)
    dim = int(embs[0].shape[1])
    index = EmbeddingIndex(dim)
    for mp, e in zip(pages, embs):
        index.add(PageRecord(mp.doc_id, mp.page_id, mp.page_number, e, mp.image_path, mp.text))
    out = _path(args.out, cfg.paths.index, "output index")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_index(index, out)
    _emit(args, {"pages": len(index), "dim": dim, "index": out}, [f"pages: {len(index)}", f"dim: {dim}", f"index: {out}"])
    return EXIT_OK


def cmd_build_graph(args, cfg: AppConfig) -> int:
    index = _load_index(args, cfg)
    graph = build_page_graph(index, cfg.graph.theta_g)
    out = _path(args.out, cfg.paths.graph, "output graph")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_page_graph(graph, out)
    doc = {"nodes": len(graph.nodes), "edges": len(graph.edges), "theta_g": graph.theta_g, "graph": out}
    _emit(args, doc, [f"nodes: {doc['nodes']}", f"edges: {doc['edges']}", f"graph: {out}"])
    return EXIT_OK


def _atoms(args) -> Optional[list[str]]:
    if not args.atoms:
        return None
    return [a.strip() for a in args.atoms.split(";") if a.strip()]


def _trace_path(args, cfg: AppConfig, name: str) -> Path:
    return Path(args.trace) if args.trace else Path(cfg.paths.reports) / name


def cmd_retrieve(args, cfg: AppConfig) -> int:
    index = _load_index(args, cfg)
    engine = _engine(args, cfg, index)
    run = engine.retrieve(args.question, doc_id=args.doc_id, atoms=_atoms(args), baseline=args.baseline)
    trace_path = _trace_path(args, cfg, "retrieve_trace.jsonl")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    write_trace(run.trace, trace_path)
    doc = {
        "question": args.question,
        "method": "pure_li" if args.baseline else "mab",
        "atoms": run.atoms,
        "ranking": [[p, s] for p, s in run.ranking],
        "judge_calls": run.judge_calls,
        "budget": cfg.retrieval.budget,
        "trace_path": str(trace_path),
        "config": cfg.echo(),
    }
    lines = [f"{'rank':>4}  {'page':<24} score"]
    lines += [f"{i:>4}  {p:<24} {s:.6f}" for i, (p, s) in enumerate(run.ranking, 1)]
    lines.append(f"judge calls: {run.judge_calls}/{cfg.retrieval.budget}")
    _emit(args, doc, lines)
    return EXIT_OK


def cmd_answer(args, cfg: AppConfig) -> int:
    index = _load_index(args, cfg)
    engine = _engine(args, cfg, index)
    run = engine.retrieve(args.question, doc_id=args.doc_id, atoms=_atoms(args))
    text, rtrace = engine.answer(run)
    trace_path = _trace_path(args, cfg, "answer_trace.jsonl")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    write_trace(run.trace, trace_path)
    _dump(trace_path.with_suffix(".reasoning.json"), rtrace.to_json())
    record = {
        "qid": args.qid,
        "answer": text,
        "rounds": rtrace.rounds_used,
        "degraded": rtrace.degraded,
        "trace_path": str(trace_path),
    }
    out = Path(args.out) if args.out else Path(cfg.paths.reports) / "answers.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    doc = {**record, "pages": run.page_ids, "judge_calls": run.judge_calls, "config": cfg.echo()}
    _emit(args, doc, [text, f"rounds: {rtrace.rounds_used}"] + (["degraded: true"] if rtrace.degraded else []))
    return EXIT_OK


def cmd_eval(args, cfg: AppConfig) -> int:
    dataset = load_dataset(_path(args.dataset, cfg.paths.dataset, "dataset"))
    if args.limit is not None:
        dataset = sorted(dataset, key=lambda r: r.qid)[: args.limit]
    out_dir = Path(args.out_dir or cfg.paths.reports)
    if dataset:
        index = _load_index(args, cfg)
        engine = _engine(args, cfg, index)
        grader = (lambda q, pred, gt: grade_answer(engine.gateway, q, pred, gt)) if not args.no_answer else None
        report = run_benchmark(
            dataset,
            engine,
            grader=grader,
            config=cfg.echo(),
            answer=not args.no_answer,
            issues=args.issues,
            graded_ndcg=args.graded_ndcg,
        )
    else:
        report = run_benchmark([], None, config=cfg.echo())
    paths = write_report(report, out_dir)
    doc = {"counts": report.counts, "aggregates": report.aggregates, "report": str(paths["json"])}
    lines = [f"{k}: {v}" for k, v in sorted(report.counts.items())]
    lines += [f"{k}: {v:.4f}" for k, v in sorted(report.aggregates.items())]
    lines.append(f"report: {paths['json']}")
    _emit(args, doc, lines)
    return EXIT_OK


def cmd_simulate(args, cfg: AppConfig) -> int:
    spec = load_spec(args.spec) if args.spec else SyntheticCorpusSpec()
    if args.seed is not None:
        spec = SyntheticCorpusSpec(**{**asdict(spec), "seed": args.seed})
    if args.flip_prob is not None:
        spec = SyntheticCorpusSpec(**{**asdict(spec), "judge_flip_prob": args.flip_prob})
    spec.validate()
    report = compare_methods(
        spec,
        trials=args.trials,
        params=cfg.retrieval,
        theta_g=cfg.graph.theta_g,
        theta_h=cfg.graph.theta_h,
    )
    report.config["app"] = cfg.echo()
    paths = write_comparison(report, Path(args.out_dir or cfg.paths.reports))
    r5 = "recall@5"
    doc = {
        "means": report.means,
        "differences": report.differences,
        "sign_test": report.sign_test,
        "arm_means": report.arm_means,
        "report": str(paths["json"]),
    }
    lines = [f"{m} {r5}: {report.means[m][r5]:.4f}" for m in report.methods]
    if r5 in report.sign_test:
        lines.append(f"sign test p ({r5}): {report.sign_test[r5]['p_value']:.3g}")
    for k, v in sorted(report.arm_means.items()):
        lines.append(f"{k} arm mean: {v:.4f}")
    lines.append(f"report: {paths['json']}")
    _emit(args, doc, lines)
    return EXIT_OK


def cmd_export_heatmap(args, cfg: AppConfig) -> int:
    index = _load_index(args, cfg)
    if args.page not in index:
        raise UsageError(f"page {args.page!r} not in index")
    gw = _gateway(cfg, args, index.dim)
    q = gw.embed([args.question])[0]
    values = export_similarity_map(q, index.get(args.page).embedding)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["page_id", "vector", "max_sim"])
        for i, v in enumerate(values):
            w.writerow([args.page, i, repr(float(v))])
    _emit(args, {"page": args.page, "rows": len(values), "csv": str(out)}, [f"rows: {len(values)}", f"csv: {out}"])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config file")
    common.add_argument("--mock", action="store_true", help="offline deterministic gateway, no network")
    common.add_argument("--mock-script", metavar="PATH", help="JSON rules for the mock gateway")
    common.add_argument("--seed", type=int, help="overrides the retrieval seed")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("-v", "--verbose", action="count", default=0)

    index_opts = argparse.ArgumentParser(add_help=False)
    index_opts.add_argument("--index", metavar="PATH")
    index_opts.add_argument("--manifest", metavar="PATH", help="restores page texts and image paths")

    tuning = argparse.ArgumentParser(add_help=False)
    tuning.add_argument("--alpha", type=float, help="judge-reward weight")
    tuning.add_argument("--beta", type=float, help="structural weight")
    tuning.add_argument("--lambda", dest="lam", type=float, help="confidence share of the structural term")
    tuning.add_argument("--m", type=int, help="judge budget")
    tuning.add_argument("--k", type=int, help="pages returned")
    tuning.add_argument("--theta-g", type=float)
    tuning.add_argument("--theta-h", type=int)
    tuning.add_argument("--max-rounds", type=int)
    tuning.add_argument("--subgraph-cap", type=int)
    tuning.add_argument("--graph", metavar="PATH", help="cached page graph")

    query = argparse.ArgumentParser(add_help=False)
    query.add_argument("question")
    query.add_argument("--doc-id", help="restrict to one document")
    query.add_argument("--atoms", help="';'-separated subqueries, skipping decomposition")
    query.add_argument("--trace", metavar="PATH", help="JSONL trace output")

    p = argparse.ArgumentParser(prog="mabdqa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="embed a manifest into a binary index")
    s.add_argument("manifest")
    s.add_argument("--out", metavar="PATH")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("build-graph", parents=[common, index_opts], help="cache the page similarity graph")
    s.add_argument("--theta-g", type=float)
    s.add_argument("--out", metavar="PATH")
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("retrieve", parents=[common, index_opts, tuning, query], help="rank pages for a question")
    s.add_argument("--baseline", action="store_true", help="pure late-interaction top-k")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("answer", parents=[common, index_opts, tuning, query], help="retrieve, then answer")
    s.add_argument("--qid", default="q0")
    s.add_argument("--out", metavar="PATH", help="answer record (JSONL)")
    s.set_defaults(func=cmd_answer)

    s = sub.add_parser("eval", parents=[common, index_opts, tuning], help="benchmark a JSONL dataset")
    s.add_argument("dataset", nargs="?")
    s.add_argument("--out-dir", metavar="DIR")
    s.add_argument("--no-answer", action="store_true", help="retrieval metrics only")
    s.add_argument("--issues", action="store_true", help="also flag aspect degradation")
    s.add_argument("--graded-ndcg", action="store_true")
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", parents=[common, tuning], help="MAB vs pure-LI on synthetic corpora")
    s.add_argument("--spec", metavar="PATH", help="TOML corpus spec")
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--flip-prob", type=float)
    s.add_argument("--out-dir", metavar="DIR")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("export-heatmap", parents=[common, index_opts], help="per-vector max-sim CSV")
    s.add_argument("question")
    s.add_argument("--page", required=True)
    s.add_argument("--out", required=True, metavar="PATH")
    s.set_defaults(func=cmd_export_heatmap)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError, ContractError, GatewayConfigError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GatewayError, IndexFileError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
