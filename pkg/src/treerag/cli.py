"""Command-line front end: ``ingest``, ``build-index``, ``query`` and ``eval``.

stdout carries only JSON; diagnostics go to stderr. Exit codes: 0 success, 2 I/O,
64 usage or configuration, 70 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, EngineConfig, load_config
from .corpus import chunk_corpus, load_corpus
from .embedding import make_embedder
from .errors import CorpusError, IndexStoreError, TreeRagError
from .evaluation import ContainmentJudge, LlmOltpJudge, load_dataset, run_eval
from .index import build_index, load_index, save_index
from .llm import ChatClient, generate_answer
from .retrieval import retrieve
from .tree import build_tree, make_summarizer

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_INTERNAL = 0, 2, 64, 70

log = logging.getLogger("treerag")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n")


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")
    return code


def _config(args) -> EngineConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    return cfg.model_copy(update=updates) if updates else cfg


def _index_dir(args, cfg: EngineConfig) -> Path:
    return Path(args.index_dir or cfg.paths.index_dir)


def _retrieval_config(args, cfg: EngineConfig):
    rc = cfg.retrieval.model_copy(deep=True)
    if getattr(args, "mode", None):
        rc.mode = args.mode
    if getattr(args, "top_n", None) is not None:
        rc.rrf.top_n = args.top_n
        rc.traversal.k = rc.collapsed.k = args.top_n
    if getattr(args, "budget", None) is not None:
        rc.rrf.token_budget = args.budget
        rc.traversal.token_budget = rc.collapsed.token_budget = args.budget
    return rc


def cmd_ingest(args) -> int:
    cfg = _config(args)
    docs = load_corpus(args.corpus, args.format or cfg.corpus.format, cfg.corpus.allow_empty)
    chunks = chunk_corpus(docs, cfg.corpus)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for c in chunks:
                fh.write(json.dumps(c.__dict__, ensure_ascii=False) + "\n")
    _emit(
        {
            "documents": len(docs),
            "chunks": len(chunks),
            "tokens": sum(c.token_count for c in chunks),
            "out": args.out,
        }
    )
    return EXIT_OK


def cmd_build_index(args) -> int:
    cfg = _config(args)
    docs = load_corpus(args.corpus, args.format or cfg.corpus.format, cfg.corpus.allow_empty)
    chunks = chunk_corpus(docs, cfg.corpus)
    if not chunks:
        raise CorpusError(f"corpus {args.corpus} produced no chunks")
    embedder = make_embedder(cfg.embedder)
    summarizer = make_summarizer(cfg.summarizer)
    tree = build_tree(chunks, embedder, summarizer, cfg.clustering, cfg.seed, jobs=cfg.jobs)
    index = build_index(tree)
    out_dir = _index_dir(args, cfg)
    checksum = save_index(index, out_dir)
    _emit(
        {
            "index_dir": str(out_dir),
            "manifest_sha256": checksum,
            "documents": len(docs),
            "chunks": len(chunks),
            "nodes": len(index),
            "depth": tree.depth,
            "nodes_per_level": [len(level) for level in tree.levels],
            "summarizer_usage": summarizer.meter.to_dict(),
            "levels": tree.diagnostics,
        }
    )
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = _config(args)
    index = load_index(_index_dir(args, cfg))
    embedder = make_embedder(cfg.embedder)
    result = retrieve(args.query, index, embedder, _retrieval_config(args, cfg))
    out = result.to_dict()
    if args.generate:
        if cfg.generator is None:
            raise ConfigError("--generate needs a 'generator' section in the config")
        out["answer"] = generate_answer(ChatClient(cfg.generator), args.query, result.texts)
    _emit(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    try:
        dataset, skipped = load_dataset(args.dataset)
    except OSError as exc:
        raise CorpusError(f"cannot read dataset {args.dataset}: {exc}") from exc
    index = load_index(_index_dir(args, cfg))
    embedder = make_embedder(cfg.embedder)
    rc = _retrieval_config(args, cfg)
    generator = judge = None
    if args.generate:
        if cfg.generator is None:
            raise ConfigError("--generate needs a 'generator' section in the config")
        generator = ChatClient(cfg.generator)
        if cfg.judge.provider == "remote_llm":
            if cfg.judge.llm is None:
                raise ConfigError("remote_llm judge needs a 'judge.llm' section")
            judge = LlmOltpJudge(ChatClient(cfg.judge.llm), cfg.judge.logit_bias)
        else:
            judge = ContainmentJudge()

    report = run_eval(dataset, lambda q: retrieve(q, index, embedder, rc).texts, generator, judge)
    report.skipped = skipped
    payload = report.to_dict()
    payload["mode"] = rc.mode
    if args.out:
        Path(args.out).write_text(json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n")
        _emit({"out": args.out, "questions": len(report.rows), "failed": report.failed, "skipped": len(skipped)})
    else:
        _emit(payload)
    if report.rows and report.failed == len(report.rows):
        return EXIT_INTERNAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="engine config JSON file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="treerag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="load and chunk a corpus")
    p.add_argument("corpus")
    p.add_argument("--format", choices=["jsonl", "plain_dir"])
    p.add_argument("--out", help="write chunks as JSONL here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-index", parents=[common], help="build the tree and persist the index")
    p.add_argument("corpus")
    p.add_argument("--format", choices=["jsonl", "plain_dir"])
    p.add_argument("--index-dir")
    p.set_defaults(func=cmd_build_index)

    for name, func in (("query", cmd_query), ("eval", cmd_eval)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("query" if name == "query" else "dataset")
        p.add_argument("--index-dir")
        p.add_argument("--mode", choices=["trex", "traversal", "collapsed"])
        p.add_argument("--top-n", type=int, help="contexts for trex; k for traversal/collapsed")
        p.add_argument("--budget", type=int, help="context token budget")
        p.add_argument("--generate", action="store_true", help="answer with the configured LLM")
        if name == "eval":
            p.add_argument("--out", help="write the report here instead of stdout")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    for flag in ("jobs", "top_n", "budget"):
        value = getattr(args, flag, None)
        if value is not None and value < (1 if flag != "budget" else 0):
            return _fail(EXIT_USAGE, "usage", f"--{flag.replace('_', '-')} is out of range: {value}")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except (CorpusError, IndexStoreError, OSError) as exc:
        return _fail(EXIT_IO, type(exc).__name__, str(exc))
    except TreeRagError as exc:
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        return _fail(EXIT_INTERNAL, type(exc).__name__, str(exc))


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
