"""Command line: ``xmc {synth,train,explain,evaluate,report}``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one line ``xmc: error code=<n> kind=<kind> message=<json string>``
to stderr and remove the files the command had written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import metrics as M
from . import pipeline as P
from .attribution import AttributionError, write_attributions
from .config import ConfigError, RunConfig
from .data import DataError, synth_manifest, write_corpus
from .metrics import MetricError
from .model import ModelError, save_model
from .training import NumericError, TrainingError

log = logging.getLogger("xmc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class Outputs:
    """Tracks files written by one command; removes them on failure."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.path(rel)
        p.write_text(text, encoding="utf-8")
        return p

    def cleanup(self) -> None:
        for p in reversed(self.written):
            p.unlink(missing_ok=True)
        for p in sorted({q.parent for q in self.written}, key=lambda q: -len(q.parts)):
            try:
                if p != self.root and p.is_dir() and not any(p.iterdir()):
                    p.rmdir()
            except OSError:
                pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Outputs, command: str, cfg: RunConfig, seeds, argv, seconds: float) -> None:
    path = out.root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"artifacts": {}, "commands": {}}
    for p in out.written:
        rel = p.relative_to(out.root).as_posix()
        manifest["artifacts"][rel] = {"command": command, "sha256": _sha256(p)}
    manifest["commands"][command] = {"config_hash": cfg.hash(), "seeds": list(seeds),
                                     "argv": list(argv), "seconds": round(seconds, 3)}
    manifest["config_hash"] = cfg.hash()
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _seeds(args, default: int) -> list[int]:
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    return [args.seed if args.seed is not None else default]


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig, args, out: Outputs) -> list[int]:
    if cfg.data.synth is None:
        raise ConfigError("synth needs a data.synth section")
    sc = cfg.data.synth_config(args.seed)
    splits = P.load_records(cfg, args.seed)
    for split, recs in splits.items():
        write_corpus(out.path(f"corpus/{split}.jsonl"), recs)
    out.write_text("corpus/synth_manifest.json", P.dump_json(synth_manifest(sc)))
    return [sc.seed]


def cmd_train(cfg: RunConfig, args, out: Outputs) -> list[int]:
    seeds = _seeds(args, cfg.train.seed)
    strategy = args.strategy or cfg.train.strategy
    corpus = P.build_corpus(cfg, P.load_records(cfg))
    rows = []
    for seed in seeds:
        init = None
        if strategy == "tm":
            if not args.model:
                raise ConfigError("tm needs --model pointing at a trained baseline checkpoint")
            init, vocab = P.load_checkpoint(args.model.format(seed=seed))
            if vocab != corpus.vocab:
                raise DataError("baseline checkpoint vocabulary differs from this corpus")
        params, trace = P.train_one(cfg, corpus, seed, strategy, init)
        save_model(out.path(f"seed-{seed}/model.xmc"), params)
        corpus.vocab.save(out.path(f"seed-{seed}/model.vocab.txt"))
        out.write_text(f"seed-{seed}/train_log.jsonl",
                       "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace.records))
        r, _ = P.prediction_rows(params, corpus, seed, strategy)
        rows += r
    if len(seeds) > 1:
        rows += P.aggregate_rows(rows)
    M.write_csv(out.path("train_metrics.csv"), rows)
    return seeds


def _methods(cfg: RunConfig, args) -> list[str]:
    return [args.method] if args.method else list(cfg.attribution.methods)


def cmd_explain(cfg: RunConfig, args, out: Outputs) -> list[int]:
    if not args.model:
        raise ConfigError("explain needs --model")
    params, vocab = P.load_checkpoint(args.model)
    corpus = P.corpus_for_model(cfg, params, vocab)
    seed = args.seed if args.seed is not None else cfg.attribution.seeds[0]
    for method in _methods(cfg, args):
        for split in ("val", "test"):
            docs = P.limit(corpus.docs[split], cfg.attribution.max_docs)
            vecs = P.explain_docs(params, docs, method, seed, cfg)
            write_attributions(out.path(P.attribution_path(Path(""), split, method).as_posix()), vecs)
    return [seed]


def cmd_evaluate(cfg: RunConfig, args, out: Outputs) -> list[int]:
    seed = args.seed if args.seed is not None else cfg.train.seed
    strategy = args.strategy or cfg.train.strategy
    params = None
    if args.model:
        params, vocab = P.load_checkpoint(args.model)
        corpus = P.corpus_for_model(cfg, params, vocab)
    else:
        corpus = P.build_corpus(cfg, P.load_records(cfg))
    rows, analysis = [], {}
    code_threshold, test_probs = None, None
    if params is not None:
        r, code_threshold = P.prediction_rows(params, corpus, seed, strategy)
        rows += r
        test_probs = P.class_probs(params, corpus.docs["test"])
    for method in _methods(cfg, args):
        val_vecs = P.read_method(out.root, "val", method, corpus.labels)
        test_vecs = P.read_method(out.root, "test", method, corpus.labels)
        r, a = P.evaluate_method(method, val_vecs, test_vecs, corpus, cfg, params, seed, strategy,
                                 code_threshold, test_probs)
        rows += r
        analysis[method] = a
    M.write_csv(out.path("metrics.csv"), rows)
    out.write_text("analysis.json", P.dump_json({"seed": seed, "strategy": strategy, "methods": analysis}))
    return [seed]


def cmd_report(cfg: RunConfig, args, out: Outputs) -> list[int]:
    method = args.method or cfg.report.method or cfg.attribution.methods[0]
    if args.model:
        params, vocab = P.load_checkpoint(args.model)
        corpus = P.corpus_for_model(cfg, params, vocab)
    else:
        corpus = P.build_corpus(cfg, P.load_records(cfg))
    vecs = P.read_method(out.root, "test", method, corpus.labels)
    by_doc: dict[str, list] = {}
    for v in vecs:
        by_doc.setdefault(v.doc_id, []).append(v)
    links = []
    for doc in corpus.docs["test"]:
        if doc.doc_id not in by_doc or len(links) >= cfg.report.max_docs:
            continue
        name = f"report/docs/{doc.doc_id}.html"
        out.write_text(name, P.render_document(doc, by_doc[doc.doc_id], method))
        links.append(doc.doc_id)
    tables = ""
    for csv_name in ("metrics.csv", "train_metrics.csv"):
        if (out.root / csv_name).exists():
            tables += P.render_summary(P.read_csv_rows(out.root / csv_name), csv_name)
    items = "".join(f"<li><a href='docs/{d}.html'>{d}</a></li>" for d in links)
    out.write_text("report/index.html",
                   f"<!DOCTYPE html><html><head><meta charset='utf-8'><title>report</title>"
                   f"<style>{P.STYLE}</style></head><body>"
                   f"<h1>Attribution report ({method})</h1><ul>{items}</ul>{tables}</body></html>\n")
    return []


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "explain": cmd_explain,
            "evaluate": cmd_evaluate, "report": cmd_report}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):   # keep stderr to the single error line
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xmc", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds (train)")
    p.add_argument("--strategy", choices=["baseline", "supervised", "igr", "pgd", "tm"])
    p.add_argument("--method")
    p.add_argument("--model", help="checkpoint path; '{seed}' is substituted for tm")
    p.add_argument("--out", help="output directory (default: config 'output')")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_line(code: int, kind: str, msg: str) -> str:
    return f"xmc: error code={code} kind={kind} message={json.dumps(' '.join(str(msg).split()))}"


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(_error_line(EXIT_CONFIG, "usage", exc), file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit:   # --help
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        if not args.config:
            raise ConfigError("--config is required")
        cfg = RunConfig.load(args.config)
        out = Outputs(Path(args.out or cfg.output))
        out.root.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        out.write_text(f"config.{args.command}.json", P.dump_json(cfg.to_dict()))
        seeds = COMMANDS[args.command](cfg, args, out)
        write_manifest(out, args.command, cfg, seeds, argv, time.perf_counter() - start)
        return EXIT_OK
    except (ConfigError, TrainingError) as exc:
        code, kind = (EXIT_NUMERIC, "numeric") if isinstance(exc, NumericError) else (EXIT_CONFIG, "config")
        err = exc
    except (DataError, ModelError, AttributionError, MetricError, OSError) as exc:
        code, kind, err = EXIT_DATA, "data", exc
    except FloatingPointError as exc:
        code, kind, err = EXIT_NUMERIC, "numeric", exc
    if out is not None:
        out.cleanup()
    print(_error_line(code, kind, err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
