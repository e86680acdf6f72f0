"""Stages behind the command line: data, training, explanation, evaluation, report."""

from __future__ import annotations

import csv
import html
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics as M
from .attribution import AttributionVector, explain, read_attributions
from .config import ConfigError, RunConfig
from .data import (
    DataError,
    DocumentRecord,
    TokenizedDocument,
    Vocab,
    generate_synthetic,
    load_corpus,
    tokenize_and_align,
)
from .model import ModelConfig, ModelParameters, batch_probs, load_model
from .training import TrainLog, label_matrix, train_run

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class Corpus:
    vocab: Vocab
    labels: tuple[str, ...]
    docs: dict[str, list[TokenizedDocument]]


def load_records(cfg: RunConfig, synth_seed: int | None = None) -> dict[str, list[DocumentRecord]]:
    if cfg.data.synth is not None:
        return generate_synthetic(cfg.data.synth_config(synth_seed))
    out = {}
    for split in SPLITS:
        path = getattr(cfg.data, split)
        if path is None:
            if split == "train":
                raise ConfigError("data.train path missing")
            out[split] = []
            continue
        try:
            out[split] = load_corpus(path)
        except FileNotFoundError as exc:
            raise DataError(f"corpus file not found: {path}") from exc
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from exc
    return out


def labels_of(records: dict[str, list[DocumentRecord]]) -> tuple[str, ...]:
    return tuple(sorted({c for recs in records.values() for r in recs for c in r.codes}))


def build_corpus(cfg: RunConfig, records, vocab: Vocab | None = None,
                 labels: Sequence[str] | None = None) -> Corpus:
    if vocab is None:
        vocab = Vocab.build([r.text for r in records["train"]], cfg.data.vocab_max_size)
    labels = tuple(labels) if labels is not None else labels_of(records)
    docs = {s: [tokenize_and_align(r, vocab, cfg.data.max_len) for r in records.get(s, [])] for s in SPLITS}
    return Corpus(vocab, labels, docs)


def model_config(cfg: RunConfig, corpus: Corpus) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab_size=len(corpus.vocab), num_classes=len(corpus.labels), embed_dim=m.embed_dim,
                       layers=m.layers, heads=m.heads, max_len=cfg.data.max_len, dropout=m.dropout,
                       ff_mult=m.ff_mult, labels=corpus.labels)


def vocab_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.stem + ".vocab.txt")


def load_checkpoint(path) -> tuple[ModelParameters, Vocab]:
    try:
        params = load_model(path)
        vocab = Vocab.load(vocab_path(path))
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint file not found: {exc.filename}") from exc
    return params, vocab


def corpus_for_model(cfg: RunConfig, params: ModelParameters, vocab: Vocab) -> Corpus:
    return build_corpus(cfg, load_records(cfg), vocab, params.config.labels)


# ---------------------------------------------------------------- training

def train_one(cfg: RunConfig, corpus: Corpus, seed: int, strategy: str | None = None,
              init: ModelParameters | None = None) -> tuple[ModelParameters, TrainLog]:
    tc = cfg.train.to_dict()
    tc["seed"] = seed
    if strategy is not None:
        tc["strategy"] = strategy
    from .training import TrainConfig
    trace = TrainLog()
    params = train_run(corpus.docs["train"], corpus.docs["val"], model_config(cfg, corpus),
                       TrainConfig.from_dict(tc), init=init, log_to=trace)
    return params, trace


def probs_and_truth(params: ModelParameters, docs: Sequence[TokenizedDocument]):
    probs = batch_probs(params, [d.token_ids for d in docs])
    return probs, label_matrix(docs, params.config.labels)


def prediction_rows(params, corpus: Corpus, seed, strategy: str) -> tuple[list[tuple], float]:
    vp, vy = probs_and_truth(params, corpus.docs["val"])
    tau = M.tune_code_threshold(vp, vy)
    rows = M.metric_rows(seed, strategy, "-", "val", {"code_threshold": tau})
    for split in ("val", "test"):
        if corpus.docs[split]:
            p, y = probs_and_truth(params, corpus.docs[split])
            rows += M.metric_rows(seed, strategy, "-", split, M.prediction_metrics(p, y, tau))
    return rows, tau


def aggregate_rows(rows: Sequence[tuple]) -> list[tuple]:
    """Mean and population std across seeds for every (strategy, method, split, metric)."""
    groups: dict[tuple, list[float]] = {}
    for seed, strategy, method, split, metric, value in rows:
        groups.setdefault((strategy, method, split, metric), []).append(float(value))
    out = []
    for key in sorted(groups):
        v = np.array(groups[key])
        strategy, method, split, metric = key
        out.append(("mean", strategy, method, split, metric, M.format_value(v.mean())))
        out.append(("std", strategy, method, split, metric, M.format_value(v.std())))
    return out


# ---------------------------------------------------------------- explanation

def annotated_classes(doc: TokenizedDocument, labels: Sequence[str]) -> list[int]:
    index = {c: j for j, c in enumerate(labels)}
    return [index[c] for c in sorted(set(doc.codes)) if c in index and any(doc.evidence.get(c, []))]


def worker_count() -> int:
    raw = os.environ.get("XMC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"XMC_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def explain_docs(params: ModelParameters, docs: Sequence[TokenizedDocument], method: str, seed: int,
                 cfg: RunConfig) -> list[AttributionVector]:
    settings = cfg.attribution.settings()
    labels = params.config.labels

    def one(doc):
        return explain(method, params, doc.token_ids, annotated_classes(doc, labels), doc.doc_id,
                       seed, settings, labels)

    threads = worker_count()
    if threads == 1:
        results = [one(d) for d in docs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, docs))   # input order preserved
    return [v for vs in results for v in vs]


def limit(docs, n):
    return list(docs) if n is None else list(docs)[:n]


def attribution_path(out: Path, split: str, method: str) -> Path:
    return out / "attributions" / split / f"{method}.jsonl"


# ---------------------------------------------------------------- evaluation

def to_pairs(vectors: Sequence[AttributionVector], docs: Sequence[TokenizedDocument]) -> list[M.Pair]:
    by_id = {d.doc_id: d for d in docs}
    pairs = []
    for v in vectors:
        d = by_id.get(v.doc_id)
        if d is None:
            raise DataError(f"attribution for unknown document {v.doc_id!r}")
        if len(v.scores) != len(d):
            raise DataError(f"doc {v.doc_id} code {v.code}: {len(v.scores)} scores for {len(d)} tokens")
        spans = [sp for sp in d.evidence.get(v.code, []) if sp]
        if not spans:
            continue
        pairs.append(M.Pair(v.doc_id, v.code, v.scores, spans, np.asarray(d.special)))
    return pairs


def evaluate_method(method: str, val_vecs, test_vecs, corpus: Corpus, cfg: RunConfig,
                    params: ModelParameters | None, seed, strategy: str,
                    code_threshold: float | None, test_probs: dict | None):
    val_pairs = to_pairs(val_vecs, corpus.docs["val"])
    test_pairs = to_pairs(test_vecs, corpus.docs["test"])
    if not val_pairs or not test_pairs:
        raise DataError(f"{method}: need annotated attributions on both val and test")
    tau, val_f1 = M.tune_threshold(val_pairs, cfg.metrics.normalization)
    pcfg = cfg.metrics.plausibility(tau)
    rows = M.metric_rows(seed, strategy, method, "val", {"tau": tau, "F1": val_f1})
    rows += M.metric_rows(seed, strategy, method, "test", M.plausibility(test_pairs, pcfg).values())
    faith_methods = cfg.metrics.faithfulness_methods
    if params is not None and (faith_methods is None or method in faith_methods):
        docs = {d.doc_id: d for d in limit(corpus.docs["test"], cfg.metrics.max_faith_docs)}
        items = [(v.doc_id, v.code, v.class_index, docs[v.doc_id].token_ids, v.scores)
                 for v in test_vecs if v.doc_id in docs]
        rep = M.faithfulness(params, items, cfg.metrics.faithfulness())
        rows += M.metric_rows(seed, strategy, method, "test", rep.values())
    analysis = M.analysis_suite(test_pairs, pcfg, test_probs, code_threshold if code_threshold is not None else 0.5)
    return rows, analysis.to_dict()


def class_probs(params: ModelParameters, docs: Sequence[TokenizedDocument]) -> dict[tuple[str, str], float]:
    probs = batch_probs(params, [d.token_ids for d in docs]) if docs else np.zeros((0, 0))
    return {(d.doc_id, c): float(probs[i, j]) for i, d in enumerate(docs)
            for j, c in enumerate(params.config.labels)}


def read_method(out: Path, split: str, method: str, labels) -> list[AttributionVector]:
    path = attribution_path(out, split, method)
    if not path.exists():
        raise DataError(f"missing attribution file {path}")
    return read_attributions(path, labels)


# ---------------------------------------------------------------- report

def _color(v: float) -> str:
    a = max(0.0, min(1.0, v))
    return f"rgba(220, 60, 30, {a:.3f})"


STYLE = ("body{font-family:sans-serif;max-width:60em;margin:2em auto}"
          "span.t{padding:0 1px}span.ev{text-decoration:underline;text-decoration-thickness:2px}"
          "table{border-collapse:collapse}td,th{border:1px solid #bbb;padding:2px 6px;text-align:right}")


def render_document(doc: TokenizedDocument, vectors: Sequence[AttributionVector], method: str) -> str:
    parts = [f"<!DOCTYPE html><html><head><meta charset='utf-8'><title>{html.escape(doc.doc_id)}</title>"
             f"<style>{STYLE}</style></head><body><h1>{html.escape(doc.doc_id)}</h1>"
             f"<p>method: {html.escape(method)}</p>"]
    for v in vectors:
        s = v.scores / v.scores.max() if v.scores.max() > 0 else v.scores
        ev = set(doc.evidence_tokens(v.code))
        toks = []
        for i, surf in enumerate(doc.surfaces):
            label = surf or ("&lt;s&gt;" if i == 0 else "&lt;/s&gt;")
            text = html.escape(surf) if surf else label
            cls = "t ev" if i in ev else "t"
            toks.append(f"<span class='{cls}' style='background:{_color(s[i])}' "
                        f"title='{v.scores[i]:.4g}'>{text}</span>")
        parts.append(f"<h2>{html.escape(str(v.code))}</h2><p>{' '.join(toks)}</p>")
    parts.append("</body></html>\n")
    return "".join(parts)


def render_summary(rows: Sequence[Sequence[str]], title: str) -> str:
    """An HTML table fragment of metric rows."""
    head = "".join(f"<th>{html.escape(c)}</th>" for c in M.CSV_COLUMNS)
    body = "".join("<tr>" + "".join(f"<td>{html.escape(str(c))}</td>" for c in r) + "</tr>" for r in rows)
    return f"<h2>{html.escape(title)}</h2><table><tr>{head}</tr>{body}</table>"


def read_csv_rows(path: Path) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
