"""Single entry point: ingest, index, serve, ask (one-shot), analyze.

stdout carries data, stderr carries diagnostics. Exit codes: 0 success,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

from . import analytics
from . import index as index_mod
from .corpus import CorpusStore, IngestConfig, parse_corpus
from .embedding import EmbedBackend, EmbedderConfig, make_embedder
from .errors import AllFiltered, CorpusQAError, EmptyCorpus
from .generation import StubBackend, build_prompt, generate_answer, refusal_answer
from .retrieval import AudienceMode, Query, RetrievalConfig, TopicFilterMode, reformulate, retrieve
from .service import ServiceConfig, create_app


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2; the contract is 1
        raise _UsageError(message)


def _load_config(path: str | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    if path:
        read = cfg.read(path)
        if not read:
            raise CorpusQAError(f"config file not found: {path}")
    return cfg


def _retrieval_config(cfg: configparser.ConfigParser) -> RetrievalConfig:
    sect = cfg["retrieval"] if cfg.has_section("retrieval") else {}
    return RetrievalConfig(
        k_candidates=int(sect.get("k_candidates", 40)),
        k_final=int(sect.get("k_final", 10)),
        dedup_cosine=float(sect.get("dedup_cosine", 0.98)),
        topic_filter=TopicFilterMode(sect.get("topic_filter", "KEYWORD")),
        classifier_threshold=float(sect.get("classifier_threshold", 0.15)),
    )


def _embedder_from(cfg: configparser.ConfigParser, dim_flag: int | None):
    sect = cfg["embedding"] if cfg.has_section("embedding") else {}
    dim = dim_flag if dim_flag is not None else int(sect.get("dim", 256))
    backend = EmbedBackend(sect.get("backend", "REFERENCE"))
    return make_embedder(
        EmbedderConfig(
            backend=backend,
            dim=dim,
            endpoint_uri=sect.get("endpoint", ""),
            api_key_ref=sect.get("api_key", ""),
            model_tag=sect.get("model_tag", ""),
        )
    )


def _chat_backend(name: str, cfg: configparser.ConfigParser):
    if name == "stub":
        return StubBackend()
    from .generation import HttpChatBackend

    sect = cfg["llm"] if cfg.has_section("llm") else {}
    return HttpChatBackend(endpoint=sect.get("endpoint", ""), api_key=sect.get("api_key", ""))


def _build_parser() -> _Parser:
    parser = _Parser(prog="corpusqa", description="Retrieval-augmented QA over report corpora.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse an interchange stream into a store file")
    p_ingest.add_argument("--input", required=True, help="corpus interchange JSONL ('-' for stdin)")
    p_ingest.add_argument("--out", required=True, help="store file to write")
    p_ingest.add_argument("--max-chunk-tokens", type=int, default=512)

    p_index = sub.add_parser("index", help="embed a store's passages and build a search index")
    p_index.add_argument("--store", required=True)
    p_index.add_argument("--out", required=True)
    p_index.add_argument("--ann", action="store_true", help="clustered ANN instead of flat exact")
    p_index.add_argument("--clusters", type=int, default=None)
    p_index.add_argument("--probe", type=int, default=8)
    p_index.add_argument("--seed", type=int, default=0)
    p_index.add_argument("--dim", type=int, default=None)
    p_index.add_argument("--config", default=None)

    p_ask = sub.add_parser("ask", help="run the full pipeline once and print the answer")
    p_ask.add_argument("question")
    p_ask.add_argument("--store", required=True)
    p_ask.add_argument("--index", required=True)
    p_ask.add_argument("--json", action="store_true", help="machine-readable output")
    p_ask.add_argument("--mode", choices=[m.value for m in AudienceMode], default=None)
    p_ask.add_argument("--report", action="append", default=None, help="restrict to document id (repeatable)")
    p_ask.add_argument("--backend", choices=["stub", "remote"], default="stub")
    p_ask.add_argument("--config", default=None)

    p_serve = sub.add_parser("serve", help="run the HTTP chat service")
    p_serve.add_argument("--store", required=True)
    p_serve.add_argument("--index", required=True)
    p_serve.add_argument("--config", default=None)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--backend", choices=["stub", "remote"], default="remote")

    p_an = sub.add_parser("analyze", help="cluster a question log and write the topic report")
    p_an.add_argument("--log", required=True)
    p_an.add_argument("--out", required=True, help="output directory")
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--min-cluster", type=int, default=5)
    p_an.add_argument("--overrides", default=None, help="JSON file: cluster_id -> topic code")
    p_an.add_argument("--intent-overrides", default=None, help="JSON file: record_id -> intent")

    return parser


def _cmd_ingest(args: argparse.Namespace) -> int:
    config = IngestConfig(max_chunk_tokens=args.max_chunk_tokens)
    if args.input == "-":
        store = parse_corpus(sys.stdin, config)
    else:
        with open(args.input, "r", encoding="utf-8") as fh:
            store = parse_corpus(fh, config)
    store.save(args.out)
    print(
        f"ingested {len(store.manifests)} documents, {len(store.nodes)} nodes, "
        f"{len(store.passages)} passages ({store.page_total} pages)",
        file=sys.stderr,
    )
    return 0


def _cmd_index(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    store = CorpusStore.load(args.store)
    if not store.passages:
        raise CorpusQAError("store has no passages to index")
    embedder = _embedder_from(cfg, args.dim)
    passages = list(store.passages.values())
    vectors = embedder.embed([p.text for p in passages])
    entries = [
        index_mod.IndexEntry(passage_id=p.passage_id, vector=v)
        for p, v in zip(passages, vectors)
    ]
    kind = index_mod.IndexKind.CLUSTERED_ANN if args.ann else index_mod.IndexKind.FLAT_EXACT
    built = index_mod.build(
        entries,
        index_mod.IndexConfig(kind=kind, n_clusters=args.clusters, n_probe=args.probe, seed=args.seed),
    )
    Path(args.out).write_bytes(index_mod.save(built))
    print(f"indexed {len(entries)} passages ({kind.value})", file=sys.stderr)
    return 0


def _answer_to_json(answer) -> dict:
    return {
        "answer_text": answer.answer_text,
        "citations": list(answer.citations),
        "sources": [
            {
                "ref_number": s.ref_number,
                "passage_id": s.passage_id,
                "doc_title": s.doc_title,
                "section_path": list(s.section_path),
                "pages": list(s.pages),
                "snippet": s.snippet,
            }
            for s in answer.sources
        ],
        "degraded": answer.degraded,
        "refusal": answer.refusal,
    }


def _cmd_ask(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    store = CorpusStore.load(args.store)
    built = index_mod.load(Path(args.index).read_bytes())
    embedder = _embedder_from(cfg, built.dim if built.model_tag.startswith("ref3gram") else None)
    backend = _chat_backend(args.backend, cfg)
    retrieval_cfg = _retrieval_config(cfg)

    mode = AudienceMode(args.mode) if args.mode else AudienceMode.GENERAL_PUBLIC
    query = Query(
        raw_text=args.question,
        report_filter=frozenset(args.report) if args.report else None,
        audience_mode=mode,
    )
    reformulated, degraded = reformulate(query, backend)
    query.reformulated_text = reformulated
    try:
        hits = retrieve(query, built, store, retrieval_cfg, embedder=embedder)
    except (AllFiltered, EmptyCorpus):
        answer = refusal_answer()
    else:
        prompt = build_prompt(query, hits, store, mode)
        answer = generate_answer(prompt, backend)
        if degraded and not answer.degraded:
            answer = dataclasses.replace(answer, degraded=True)

    if args.json:
        print(json.dumps(_answer_to_json(answer), ensure_ascii=False))
    else:
        print(answer.answer_text)
        if answer.sources:
            print("\nSources:")
            for s in answer.sources:
                pages = f"p. {s.pages[0]}" if s.pages[0] == s.pages[1] else f"pp. {s.pages[0]}-{s.pages[1]}"
                path = " > ".join(s.section_path)
                print(f"  [{s.ref_number}] {s.doc_title} ({path}), {pages}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    cfg = _load_config(args.config)
    store = CorpusStore.load(args.store)
    built = index_mod.load(Path(args.index).read_bytes())
    embedder = _embedder_from(cfg, built.dim if built.model_tag.startswith("ref3gram") else None)
    backend = _chat_backend(args.backend, cfg)
    sect = cfg["service"] if cfg.has_section("service") else {}
    service_cfg = ServiceConfig(
        retrieval=_retrieval_config(cfg),
        default_audience=AudienceMode(sect.get("audience", "GENERAL_PUBLIC")),
        prompt_budget=int(sect.get("prompt_budget", 3000)),
        admin_token=sect.get("admin_token", ""),
        data_dir=Path(sect["data_dir"]) if sect.get("data_dir") else None,
    )
    app = create_app(store, built, embedder, backend, service_cfg)
    print(f"serving on {args.host}:{args.port}", file=sys.stderr)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    with open(args.log, "r", encoding="utf-8") as fh:
        records = analytics.load_question_log(fh)
    topic_overrides = None
    if args.overrides:
        raw = json.loads(Path(args.overrides).read_text(encoding="utf-8"))
        topic_overrides = {int(k): v for k, v in raw.items()}
    intent_overrides = None
    if args.intent_overrides:
        raw = json.loads(Path(args.intent_overrides).read_text(encoding="utf-8"))
        intent_overrides = {k: analytics.Intent(v) for k, v in raw.items()}
    params = analytics.AnalyticsParams(seed=args.seed, min_cluster_size=args.min_cluster)
    cleaned, clusters, rep = analytics.analyze_log(
        records, params, topic_overrides=topic_overrides, intent_overrides=intent_overrides
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(analytics.render_text(rep), encoding="utf-8")
    (out / "report.csv").write_text(analytics.render_csv(rep), encoding="utf-8")
    (out / "clusters.json").write_text(analytics.clusters_to_json(clusters), encoding="utf-8")
    excluded = sum(1 for q in cleaned if q.excluded is not None)
    noise = sum(c.size for c in clusters if c.cluster_id == -1)
    print(
        f"{len(cleaned)} records: {excluded} excluded, {noise} noise, "
        f"{rep.total} classified across {sum(1 for c in clusters if c.cluster_id != -1)} clusters",
        file=sys.stderr,
    )
    print(analytics.render_text(rep), end="")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "index": _cmd_index,
    "ask": _cmd_ask,
    "serve": _cmd_serve,
    "analyze": _cmd_analyze,
}


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("hint: run 'corpusqa --help' for usage", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (CorpusQAError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
