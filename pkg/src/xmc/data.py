"""Corpus records, tokenization with offsets, and the synthetic corpus."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, START, END, MASK = "<pad>", "<unk>", "<s>", "</s>", "<mask>"
RESERVED = (PAD, UNK, START, END, MASK)
PAD_ID, UNK_ID, START_ID, END_ID, MASK_ID = range(5)

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+|[^\sA-Za-z0-9]+")
_ALNUM_RE = re.compile(r"[A-Za-z0-9]")


class DataError(ValueError):
    pass


@dataclass
class CodeAnnotation:
    code: str
    evidence: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class DocumentRecord:
    id: str
    text: str
    annotations: list[CodeAnnotation] = field(default_factory=list)

    @property
    def codes(self) -> list[str]:
        return [a.code for a in self.annotations]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "codes": [{"code": a.code, "evidence": [list(s) for s in a.evidence]}
                      for a in self.annotations],
        }


def _parse_record(obj, lineno: int) -> DocumentRecord:
    def fail(msg):
        raise DataError(f"line {lineno}: {msg}")

    if not isinstance(obj, dict):
        fail("record must be a JSON object")
    missing = {"id", "text", "codes"} - obj.keys()
    if missing:
        fail(f"missing fields {sorted(missing)}")
    extra = obj.keys() - {"id", "text", "codes"}
    if extra:
        fail(f"unknown fields {sorted(extra)}")
    doc_id, text, codes = obj["id"], obj["text"], obj["codes"]
    if not isinstance(doc_id, str) or not doc_id:
        fail("id must be a non-empty string")
    if not isinstance(text, str):
        fail("text must be a string")
    if not isinstance(codes, list):
        fail("codes must be a list")
    anns = []
    for c in codes:
        if not isinstance(c, dict) or not isinstance(c.get("code"), str) or not c["code"]:
            fail("each code entry needs a non-empty 'code' string")
        spans = []
        for span in c.get("evidence", []):
            if (not isinstance(span, list) or len(span) != 2
                    or not all(isinstance(v, int) for v in span)):
                fail(f"malformed evidence span {span!r}")
            s, e = span
            if not (0 <= s < e <= len(text)):
                fail(f"evidence span [{s}, {e}) out of bounds for text of length {len(text)}")
            spans.append((s, e))
        anns.append(CodeAnnotation(c["code"], spans))
    return DocumentRecord(doc_id, text, anns)


def load_corpus(path) -> list[DocumentRecord]:
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            rec = _parse_record(obj, lineno)
            if rec.id in seen:
                raise DataError(f"line {lineno}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    return records


def write_corpus(path, records: Iterable[DocumentRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


# ---------------------------------------------------------------- tokenization

def split_words(text: str) -> list[tuple[str, int, int]]:
    """Alphanumeric runs and punctuation runs, with character offsets."""
    return [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def is_special_surface(surface: str) -> bool:
    return _ALNUM_RE.search(surface) is None


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate vocabulary entries")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None, min_count: int = 1) -> "Vocab":
        counts = Counter(w for t in texts for w, _, _ in split_words(t))
        ranked = sorted((c, w) for w, c in counts.items() if c >= min_count and w not in RESERVED)
        ranked.sort(key=lambda cw: (-cw[0], cw[1]))
        words = [w for _, w in ranked]
        if max_size is not None:
            words = words[: max(0, max_size - len(RESERVED))]
        return cls(list(RESERVED) + words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass
class TokenizedDocument:
    doc_id: str
    token_ids: np.ndarray
    spans: list[tuple[int, int]]        # character span per token; markers get (0, 0)/(len, len)
    surfaces: list[str]
    special: np.ndarray                 # bool per token
    evidence: dict[str, list[list[int]]]  # code -> token indices per annotated span
    codes: list[str]
    truncated: bool = False

    def __len__(self):
        return len(self.token_ids)

    def evidence_tokens(self, code: str) -> list[int]:
        return sorted({i for span in self.evidence.get(code, []) for i in span})


def tokenize_and_align(record: DocumentRecord, vocab: Vocab, max_len: int) -> TokenizedDocument:
    if max_len < 3:
        raise DataError("max_len must leave room for start, one token, and end")
    words = split_words(record.text)
    truncated = len(words) > max_len - 2
    words = words[: max_len - 2]
    ids = [START_ID] + [vocab.id(w) for w, _, _ in words] + [END_ID]
    n_text = len(record.text)
    spans = [(0, 0)] + [(s, e) for _, s, e in words] + [(n_text, n_text)]
    surfaces = [""] + [record.text[s:e] for _, s, e in words] + [""]
    special = np.array([is_special_surface(s) for s in surfaces], dtype=bool)
    evidence: dict[str, list[list[int]]] = {}
    for ann in record.annotations:
        per_span = []
        for es, ee in ann.evidence:
            idx = [i for i, (s, e) in enumerate(spans) if s < ee and es < e]
            per_span.append(idx)
        evidence[ann.code] = per_span
    return TokenizedDocument(record.id, np.asarray(ids, dtype=np.int64), spans, surfaces,
                             special, evidence, record.codes, truncated)


# ---------------------------------------------------------------- synthetic corpus

_PUNCT = [".", ",", ":", ";", "-", "*", "(", ")", "/", "--", "[", "]", "#", "**"]
_ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "cl", "dr", "gr", "pl", "st", "tr", "sp"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "io"]


@dataclass
class SynthConfig:
    vocab_size: int = 400               # distractor word types
    num_codes: int = 10
    phrases_per_code: int = 2
    phrase_len: tuple[int, int] = (1, 3)
    trigger_phrases: list[list[str]] | None = None  # explicit per-code phrases override generation
    code_prob: float = 0.3
    codes_per_doc: int | None = None    # fixed number of codes per doc instead of Bernoulli draws
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    length: tuple[int, int] = (10, 70)   # distractor tokens before noise scaling
    noise_rate: float = 1.0             # multiplier on distractor count; 0 gives trigger-only docs
    punct_rate: float = 0.25            # share of distractors that are punctuation runs
    decoy_rate: float = 0.03            # share of distractors that are lone trigger words
    max_tokens: int = 126               # content tokens per document, markers excluded
    seed: int = 0

    def validate(self):
        if self.num_codes < 1 or self.vocab_size < 1:
            raise DataError("num_codes and vocab_size must be positive")
        if not (0.0 <= self.code_prob <= 1.0):
            raise DataError("code_prob must lie in [0, 1]")
        for name in ("noise_rate", "punct_rate", "decoy_rate"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be non-negative")
        if self.punct_rate + self.decoy_rate > 1:
            raise DataError("punct_rate + decoy_rate must not exceed 1")
        lo, hi = self.length
        if lo < 0 or hi < lo:
            raise DataError("length must be an ordered non-negative range")
        if self.codes_per_doc is not None and not (0 <= self.codes_per_doc <= self.num_codes):
            raise DataError("codes_per_doc out of range")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown synth keys {sorted(unknown)}")
        d = dict(d)
        for key in ("phrase_len", "length"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def code_name(j: int) -> str:
    return f"C{j:03d}"


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def generate_synthetic(config: SynthConfig) -> dict[str, list[DocumentRecord]]:
    """Documents with planted trigger phrases as evidence for their codes."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    taken: set[str] = set()
    if config.trigger_phrases is not None:
        if len(config.trigger_phrases) != config.num_codes:
            raise DataError("trigger_phrases needs one entry per code")
        phrases = [[p] if isinstance(p, str) else list(p) for p in config.trigger_phrases]
        flat = [p for ps in phrases for p in ps]
        if len(set(flat)) != len(flat):
            raise DataError("trigger phrases must be disjoint across codes")
        taken.update(w for p in flat for w, _, _ in split_words(p))
    else:
        phrases = []
        for _ in range(config.num_codes):
            ps = []
            for _ in range(config.phrases_per_code):
                n = int(rng.integers(config.phrase_len[0], config.phrase_len[1] + 1))
                ps.append(" ".join(_pseudo_words(rng, n, taken)))
            phrases.append(ps)
    # lone words of multi-word phrases only; a one-word phrase as decoy would be an unlabeled trigger
    single = {p for ps in phrases for p in ps if len(split_words(p)) == 1}
    worst = int(round(config.noise_rate * config.length[1]))
    longest = sorted((max(len(split_words(p)) for p in ps) for ps in phrases), reverse=True)
    worst += sum(longest[: config.codes_per_doc if config.codes_per_doc is not None else len(longest)])
    if worst > config.max_tokens:
        raise DataError(f"trigger phrases plus distractors can reach {worst} tokens, "
                        f"longer than the document length limit {config.max_tokens}")
    trigger_words = sorted({w for ps in phrases for p in ps if p not in single
                            for w, _, _ in split_words(p)} - single)
    distractors = _pseudo_words(rng, config.vocab_size, taken)
    # Zipf-like distractor frequencies
    freq = 1.0 / np.arange(1, len(distractors) + 1)
    freq /= freq.sum()

    def sample_codes() -> list[int]:
        if config.codes_per_doc is not None:
            return sorted(rng.choice(config.num_codes, config.codes_per_doc, replace=False).tolist())
        return [j for j in range(config.num_codes) if rng.random() < config.code_prob]

    def one_doc(doc_id: str) -> DocumentRecord:
        codes = sample_codes()
        lo, hi = config.length
        n_dist = int(round(config.noise_rate * int(rng.integers(lo, hi + 1))))
        words = []
        for _ in range(n_dist):
            u = rng.random()
            if u < config.punct_rate:
                words.append(_PUNCT[rng.integers(len(_PUNCT))])
            elif u < config.punct_rate + config.decoy_rate and trigger_words:
                words.append(trigger_words[rng.integers(len(trigger_words))])
            else:
                words.append(distractors[rng.choice(len(distractors), p=freq)])
        inserts = []
        for j in codes:
            phrase = phrases[j][rng.integers(len(phrases[j]))]
            inserts.append((int(rng.integers(0, len(words) + 1)), j, phrase))
        # insert from the back so earlier positions stay valid; stable for ties
        pieces: list[tuple[str, int | None]] = [(w, None) for w in words]
        for pos, j, phrase in sorted(inserts, key=lambda t: (-t[0], -t[1])):
            pieces.insert(pos, (phrase, j))
        text_parts, cursor, spans = [], 0, {}
        for piece, j in pieces:
            if text_parts:
                text_parts.append(" ")
                cursor += 1
            if j is not None:
                spans.setdefault(j, []).append((cursor, cursor + len(piece)))
            text_parts.append(piece)
            cursor += len(piece)
        anns = [CodeAnnotation(code_name(j), spans[j]) for j in codes]
        return DocumentRecord(doc_id, "".join(text_parts), anns)

    splits = {}
    for split, n in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        splits[split] = [one_doc(f"{split}-{i:05d}") for i in range(n)]
    return splits


def synth_manifest(config: SynthConfig) -> dict:
    return {"generator": "synthetic", "config": asdict(config)}
