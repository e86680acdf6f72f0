"""Plausibility, faithfulness and prediction metrics, plus the attribution analyses."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import MASK_ID

log = logging.getLogger(__name__)

NORMALIZATIONS = ("sum", "max", "none")
PLAUSIBILITY_FIELDS = ("P", "R", "F1", "AUPRC", "Empty", "SpanR", "Cover", "IOU", "P@K", "R@K")
CSV_COLUMNS = ("seed", "strategy", "method", "split", "metric", "value")
FAITH_GUARD = 1e-9


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Pair:
    """One explained (document, code): scores over N tokens and evidence spans as token-index lists."""
    doc_id: str
    code: str
    scores: np.ndarray
    spans: tuple[tuple[int, ...], ...]
    special: np.ndarray | None = None   # (N,) bool

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "spans", tuple(tuple(int(i) for i in sp) for sp in self.spans))
        for sp in self.spans:
            if any(i < 0 or i >= len(s) for i in sp):
                raise MetricError(f"doc {self.doc_id} code {self.code}: evidence token out of range for {len(s)} tokens")

    @property
    def evidence(self) -> set[int]:
        return {i for sp in self.spans for i in sp}


@dataclass(frozen=True)
class PlausibilityConfig:
    threshold: float = 0.5
    k_rank: int = 5
    normalization: str = "sum"
    macro: bool = False

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise MetricError("threshold must lie in [0, 1]")
        if self.k_rank < 1:
            raise MetricError("k_rank must be >= 1")
        if self.normalization not in NORMALIZATIONS:
            raise MetricError(f"normalization must be one of {NORMALIZATIONS}")


@dataclass(frozen=True)
class FaithfulnessConfig:
    k_faith: int = 100
    mask_id: int = MASK_ID

    def __post_init__(self):
        if self.k_faith < 1:
            raise MetricError("k_faith must be >= 1")


@dataclass
class PlausibilityReport:
    P: float
    R: float
    F1: float
    AUPRC: float
    Empty: float
    SpanR: float
    Cover: float
    IOU: float
    PatK: float
    RatK: float
    rows: list[dict] = field(default_factory=list, repr=False)

    def values(self) -> dict[str, float]:
        return {"P": self.P, "R": self.R, "F1": self.F1, "AUPRC": self.AUPRC, "Empty": self.Empty,
                "SpanR": self.SpanR, "Cover": self.Cover, "IOU": self.IOU, "P@K": self.PatK,
                "R@K": self.RatK}


@dataclass
class FaithfulnessReport:
    comprehensiveness: float
    sufficiency: float
    skipped: int = 0
    rows: list[dict] = field(default_factory=list, repr=False)

    def values(self) -> dict[str, float]:
        return {"comprehensiveness": self.comprehensiveness, "sufficiency": self.sufficiency}


# ---------------------------------------------------------------- plausibility

def normalize(scores: np.ndarray, mode: str = "sum") -> np.ndarray:
    """Per-vector normalization onto [0, 1]; all-zero vectors stay zero."""
    if mode not in NORMALIZATIONS:
        raise MetricError(f"unknown normalization {mode!r}")
    s = np.asarray(scores, dtype=np.float64)
    if mode == "none":
        return s.copy()
    denom = s.sum() if mode == "sum" else (s.max() if s.size else 0.0)
    return s / denom if denom > 0 else np.zeros_like(s)


def _normalized(pairs: Sequence[Pair], mode: str) -> list[np.ndarray]:
    return [normalize(p.scores, mode) for p in pairs]


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _counts(norm: list[np.ndarray], pairs: Sequence[Pair], tau: float):
    tp = pred = pos = 0
    for s, p in zip(norm, pairs):
        ev = np.zeros(len(s), dtype=bool)
        ev[list(p.evidence)] = True
        hit = s >= tau
        tp += int(np.sum(hit & ev))
        pred += int(np.sum(hit))
        pos += int(np.sum(ev))
    return tp, pred, pos


def micro_prf(norm: list[np.ndarray], pairs: Sequence[Pair], tau: float) -> tuple[float, float, float]:
    tp, pred, pos = _counts(norm, pairs, tau)
    p = tp / pred if pred else 0.0
    r = tp / pos if pos else 0.0
    return p, r, _f1(p, r)


def tune_threshold(pairs: Sequence[Pair], normalization: str = "sum") -> tuple[float, float]:
    """Threshold maximizing validation micro-F1; returns (tau, F1).

    Candidates are all distinct normalized scores plus 0 and 1; ties go to
    the smaller threshold.
    """
    if not pairs:
        raise MetricError("validation set is empty")
    norm = _normalized(pairs, normalization)
    if all(not np.any(s) for s in norm):
        log.warning("all attributions are zero; threshold set to 1")
        return 1.0, micro_prf(norm, pairs, 1.0)[2]
    scores = np.concatenate(norm)
    ev = np.concatenate([np.isin(np.arange(len(s)), list(p.evidence)) for s, p in zip(norm, pairs)])
    grid = np.unique(np.concatenate([scores, [0.0, 1.0]]))
    grid = grid[(grid >= 0) & (grid <= 1)]
    # predictions at tau are scores >= tau: count with a descending sweep
    order = np.argsort(-scores, kind="stable")
    s_sorted, ev_sorted = scores[order], ev[order]
    cum_tp = np.concatenate([[0], np.cumsum(ev_sorted)])
    pos = int(ev.sum())
    best_tau, best_f1 = 1.0, -1.0
    for tau in grid:
        k = int(np.searchsorted(-s_sorted, -tau, side="right"))
        tp = int(cum_tp[k])
        p = tp / k if k else 0.0
        r = tp / pos if pos else 0.0
        f = _f1(p, r)
        if f > best_f1:
            best_tau, best_f1 = float(tau), f
    return best_tau, best_f1


def classification_metrics(pairs: Sequence[Pair], tau: float, normalization: str = "sum",
                           macro: bool = False) -> dict[str, float]:
    """Token-level P, R, F1 plus Empty, SpanR and Cover at threshold ``tau``."""
    norm = _normalized(pairs, normalization)
    if macro:
        prf = [micro_prf([s], [p], tau) for s, p in zip(norm, pairs)]
        P, R, F1 = (float(np.mean([x[i] for x in prf])) if prf else 0.0 for i in range(3))
    else:
        P, R, F1 = micro_prf(norm, pairs, tau)
    empty = spans = span_hits = 0
    cover = []
    for s, p in zip(norm, pairs):
        hit = s >= tau
        empty += not hit.any()
        for sp in p.spans:
            spans += 1
            h = int(np.sum(hit[list(sp)]))
            if h:
                span_hits += 1
                cover.append(h / len(sp))
    n = len(pairs)
    return {"P": P, "R": R, "F1": F1, "Empty": empty / n if n else 0.0,
            "SpanR": span_hits / spans if spans else 0.0,
            "Cover": float(np.mean(cover)) if cover else 0.0}


def auprc(pairs: Sequence[Pair], normalization: str = "sum") -> float:
    """Area under the micro precision-recall curve, trapezoidal over distinct thresholds,
    starting from (recall 0, precision 1)."""
    norm = _normalized(pairs, normalization)
    if not norm:
        return 0.0
    scores = np.concatenate(norm)
    ev = np.concatenate([np.isin(np.arange(len(s)), list(p.evidence)) for s, p in zip(norm, pairs)])
    pos = int(ev.sum())
    if pos == 0:
        log.warning("no evidence tokens; AUPRC undefined, reporting 0")
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    cum_tp = np.cumsum(ev[order])
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))
    tp = cum_tp[ends]
    k = ends + 1
    recall = np.concatenate([[0.0], tp / pos])
    precision = np.concatenate([[1.0], tp / k])
    # exactly rounded sum: zero-width segments (e.g. low-scored tokens after full recall) cannot shift it
    return math.fsum((recall[1:] - recall[:-1]) * (precision[1:] + precision[:-1]) / 2)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores; ties go to the lower index."""
    s = np.asarray(scores)
    order = np.lexsort((np.arange(len(s)), -s))
    return order[:k]


def ranking_metrics(pairs: Sequence[Pair], k: int = 5) -> dict[str, float]:
    if k < 1:
        raise MetricError("k must be >= 1")
    pk, rk, iou = [], [], []
    for p in pairs:
        top = set(top_k(p.scores, k).tolist())
        ev = p.evidence
        hits = len(top & ev)
        pk.append(hits / k)
        rk.append(hits / len(ev) if ev else 0.0)
        union = top | ev
        iou.append(len(top & ev) / len(union) if union else 0.0)
    mean = (lambda v: float(np.mean(v)) if v else 0.0)
    return {"P@K": mean(pk), "R@K": mean(rk), "IOU": mean(iou)}


def plausibility(pairs: Sequence[Pair], config: PlausibilityConfig) -> PlausibilityReport:
    c = classification_metrics(pairs, config.threshold, config.normalization, config.macro)
    r = ranking_metrics(pairs, config.k_rank)
    rep = PlausibilityReport(c["P"], c["R"], c["F1"], auprc(pairs, config.normalization), c["Empty"],
                             c["SpanR"], c["Cover"], r["IOU"], r["P@K"], r["R@K"])
    for name, v in rep.values().items():
        if not 0.0 <= v <= 1.0 + 1e-12:
            raise MetricError(f"{name} = {v} outside [0, 1]")
    return rep


# ---------------------------------------------------------------- faithfulness

ProbFn = Callable[[np.ndarray], np.ndarray]   # (M, N) token ids -> (M,) probability of the class


def _faith_inputs(tokens: np.ndarray, scores: np.ndarray, k: int, mask_id: int, from_top: bool):
    n = len(tokens)
    kk = min(k, n)
    rank = top_k(scores, n)                   # most important first
    if from_top:
        counts = np.arange(0, kk + 1)         # mask the i most important
        masked = [rank[:i] for i in counts]
    else:
        counts = np.arange(n - kk + 1, n + 1)  # mask the i least important
        masked = [rank[n - i:] for i in counts]
    batch = np.repeat(tokens[None, :], len(counts), axis=0)
    for row, idx in zip(batch, masked):
        row[idx] = mask_id
    return batch, kk


def _faith(f: ProbFn, tokens, scores, k: int, mask_id: int, from_top: bool) -> float | None:
    tokens = np.asarray(tokens, dtype=np.int64)
    batch, kk = _faith_inputs(tokens, np.asarray(scores), k, mask_id, from_top)
    full = float(f(tokens[None, :])[0])
    if full <= FAITH_GUARD:
        return None
    drops = np.maximum(0.0, full - np.asarray(f(batch), dtype=np.float64)) / full
    value = float(drops.sum() / kk)
    assert 0.0 <= value <= 1.0 + 1e-12, value
    return min(value, 1.0)


def comprehensiveness(f: ProbFn, tokens, scores, k: int = 100, mask_id: int = MASK_ID) -> float | None:
    """Mean normalized output drop when the i most important tokens are masked, i = 0..min(k, N).

    Returns None (pair skipped) when the unmasked output is not positive.
    """
    return _faith(f, tokens, scores, k, mask_id, True)


def sufficiency(f: ProbFn, tokens, scores, k: int = 100, mask_id: int = MASK_ID) -> float | None:
    """Mean normalized output drop over the min(k, N) largest masking counts of least important tokens."""
    return _faith(f, tokens, scores, k, mask_id, False)


def class_prob_fn(params, j: int) -> ProbFn:
    from .model import batch_probs
    return lambda ids: batch_probs(params, list(np.asarray(ids)))[:, j]


def faithfulness(params, items: Iterable[tuple[str, str, int, np.ndarray, np.ndarray]],
                 config: FaithfulnessConfig = FaithfulnessConfig()) -> FaithfulnessReport:
    """``items``: (doc_id, code, class index, tokens, scores)."""
    comp, suff, rows, skipped = [], [], [], 0
    for doc_id, code, j, tokens, scores in items:
        f = class_prob_fn(params, j)
        c = comprehensiveness(f, tokens, scores, config.k_faith, config.mask_id)
        s = sufficiency(f, tokens, scores, config.k_faith, config.mask_id)
        if c is None or s is None:
            log.warning("doc %s code %s: prediction too close to 0, skipped", doc_id, code)
            skipped += 1
            continue
        comp.append(c)
        suff.append(s)
        rows.append({"doc_id": doc_id, "code": code, "comprehensiveness": c, "sufficiency": s})
    mean = (lambda v: float(np.mean(v)) if v else 0.0)
    return FaithfulnessReport(mean(comp), mean(suff), skipped, rows)


# ---------------------------------------------------------------- prediction metrics

def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """Sum over positives of precision at their rank (ties resolved by grouping equal scores)."""
    truth = np.asarray(truth, dtype=bool)
    npos = int(truth.sum())
    if npos == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    s = np.asarray(scores)[order]
    t = truth[order]
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(t)[ends]
    k = ends + 1
    recall = np.concatenate([[0.0], tp / npos])
    precision = tp / k
    return float(np.sum((recall[1:] - recall[:-1]) * precision))


def prediction_metrics(probs: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y) > 0
    pred = probs >= threshold
    tp = np.sum(pred & y, axis=0)
    fp = np.sum(pred & ~y, axis=0)
    fn = np.sum(~pred & y, axis=0)
    present = y.any(axis=0)
    if (~present).any():
        log.info("%d codes never present; excluded from macro-F1 and mAP", int((~present).sum()))
    T, F, N = tp.sum(), fp.sum(), fn.sum()
    micro = 2 * T / (2 * T + F + N) if T else 0.0
    per = np.where(tp > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    macro = float(per[present].mean()) if present.any() else 0.0
    aps = [average_precision(probs[:, j], y[:, j]) for j in np.flatnonzero(present)]
    return {"micro_F1": float(micro), "macro_F1": macro, "mAP": float(np.mean(aps)) if aps else 0.0}


def tune_code_threshold(probs: np.ndarray, y: np.ndarray) -> float:
    """Global decision threshold maximizing validation micro-F1 on a 0.01 grid; 0.5 without data."""
    if len(probs) == 0:
        return 0.5
    grid = np.round(np.arange(1, 100) / 100, 2)
    f1 = [prediction_metrics(probs, y, t)["micro_F1"] for t in grid]
    return float(grid[int(np.argmax(f1))])


# ---------------------------------------------------------------- analysis

def normalized_entropy(scores: np.ndarray) -> tuple[float, bool]:
    """(entropy / log N, all_zero flag)."""
    s = np.asarray(scores, dtype=np.float64)
    total = s.sum()
    if total <= 0:
        return 0.0, True
    if len(s) < 2:
        return 0.0, False
    if np.all(s == s[0]):
        return 1.0, False   # uniform: exact, where the log ratio can fall an ulp short
    p = s[s > 0] / total
    return float(min(1.0, max(0.0, -np.sum(p * np.log(p)) / np.log(len(s))))), False


def special_proportion(pair: Pair, k: int = 5) -> float:
    if pair.special is None:
        raise MetricError("special-token flags missing")
    top = top_k(pair.scores, k)
    return float(np.mean(pair.special[top])) if len(top) else 0.0


def zero_special(pairs: Sequence[Pair], normalization: str = "sum") -> list[Pair]:
    """Normalize, then set special-token scores to 0; normalization becomes 'none' downstream."""
    out = []
    for p in pairs:
        s = normalize(p.scores, normalization)
        if p.special is not None:
            s = np.where(p.special, 0.0, s)
        out.append(Pair(p.doc_id, p.code, s, p.spans, p.special))
    return out


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    if len(x) < 3:
        log.warning("fewer than 3 seeds; Pearson r omitted")
        return None
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.std() == 0 or y.std() == 0:
        return None
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


@dataclass
class AnalysisReport:
    entropy: float
    all_zero: int
    special_proportion: float
    zeroing: dict[str, dict[str, float]]         # before / after / delta
    splits: dict[str, dict[str, float] | None]  # "TP" / "FN"
    split_counts: dict[str, int]

    def to_dict(self) -> dict:
        return asdict(self)


def analysis_suite(pairs: Sequence[Pair], config: PlausibilityConfig,
                   predicted: dict[tuple[str, str], float] | None = None,
                   code_threshold: float = 0.5) -> AnalysisReport:
    """Entropy, special-token share in the top-K, special zeroing and TP/FN plausibility splits.

    ``predicted`` maps (doc_id, code) to the model probability for that code.
    """
    ent = [normalized_entropy(p.scores) for p in pairs]
    before = plausibility(pairs, config).values()
    zeroed_cfg = PlausibilityConfig(config.threshold, config.k_rank, "none", config.macro)
    after = plausibility(zero_special(pairs, config.normalization), zeroed_cfg).values()
    splits: dict[str, dict | None] = {"TP": None, "FN": None}
    counts = {"TP": 0, "FN": 0}
    if predicted is not None:
        groups = {"TP": [], "FN": []}
        for p in pairs:
            groups["TP" if predicted[(p.doc_id, p.code)] >= code_threshold else "FN"].append(p)
        for name, g in groups.items():
            counts[name] = len(g)
            splits[name] = plausibility(g, config).values() if g else None
    return AnalysisReport(
        entropy=float(np.mean([e for e, _ in ent])) if ent else 0.0,
        all_zero=sum(z for _, z in ent),
        special_proportion=float(np.mean([special_proportion(p, config.k_rank) for p in pairs])) if pairs else 0.0,
        zeroing={"before": before, "after": after,
                 "delta": {k: after[k] - before[k] for k in before}},
        splits=splits, split_counts=counts)


# ---------------------------------------------------------------- output

def format_value(v: float) -> str:
    return repr(float(v))


def metric_rows(seed, strategy: str, method: str, split: str, values: dict[str, float]) -> list[tuple]:
    return [(seed, strategy, method, split, k, format_value(v)) for k, v in values.items()]


def csv_text(rows: Iterable[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_csv(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(rows))


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
