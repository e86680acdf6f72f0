import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmc.data import (
    END_ID,
    START_ID,
    UNK_ID,
    CodeAnnotation,
    DataError,
    DocumentRecord,
    SynthConfig,
    Vocab,
    generate_synthetic,
    is_special_surface,
    load_corpus,
    split_words,
    tokenize_and_align,
    write_corpus,
)


def test_empty_file_is_empty_corpus(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text("")
    assert load_corpus(p) == []


def test_round_trip(tmp_path):
    recs = [DocumentRecord("a", "fever and cough", [CodeAnnotation("R50", [(0, 5)])]),
            DocumentRecord("b", "nothing", [])]
    p = tmp_path / "c.jsonl"
    write_corpus(p, recs)
    assert load_corpus(p) == recs


@pytest.mark.parametrize("line, msg", [
    ('{"id": "a", "text": "abc", "codes": [{"code": "X", "evidence": [[0, 9]]}]}', "out of bounds"),
    ('{"id": "a", "text": "abc"}', "missing"),
    ("{not json", "malformed"),
    ('{"id": "a", "text": "abc", "codes": [{"code": "", "evidence": []}]}', "code"),
    ('{"id": "a", "text": "abc", "codes": [{"code": "X", "evidence": [[2, 1]]}]}', ""),
])
def test_schema_errors_name_the_line(tmp_path, line, msg):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id": "ok", "text": "x", "codes": []}\n' + line + "\n")
    with pytest.raises(DataError, match=f"line 2.*{msg}"):
        load_corpus(p)


def test_duplicate_ids_rejected(tmp_path):
    p = tmp_path / "c.jsonl"
    rec = json.dumps({"id": "a", "text": "x", "codes": []})
    p.write_text(rec + "\n" + rec + "\n")
    with pytest.raises(DataError, match="duplicate"):
        load_corpus(p)


def test_direct_alignment_and_special_flags():
    rec = DocumentRecord("d", "hypertension .", [CodeAnnotation("I10", [(0, 12)])])
    vocab = Vocab.build(["hypertension ."])
    doc = tokenize_and_align(rec, vocab, 16)
    assert doc.evidence_tokens("I10") == [1]
    assert doc.token_ids[0] == START_ID and doc.token_ids[-1] == END_ID
    assert list(doc.special) == [True, False, True, True]
    assert is_special_surface(".") and not is_special_surface("bp2")


def test_oov_maps_to_unk():
    doc = tokenize_and_align(DocumentRecord("d", "zzz", []), Vocab.build(["abc"]), 8)
    assert doc.token_ids[1] == UNK_ID


def test_vocab_is_deterministic_and_frequency_ordered(tmp_path):
    texts = ["b a a c", "c a"]
    v1, v2 = Vocab.build(texts), Vocab.build(list(texts))
    assert v1 == v2
    assert v1.itos[5:] == ["a", "c", "b"]
    v1.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v1


def test_truncation_sets_flag_and_keeps_markers():
    rec = DocumentRecord("d", "a b c d e f", [CodeAnnotation("X", [(10, 11)])])
    doc = tokenize_and_align(rec, Vocab.build([rec.text]), 5)
    assert doc.truncated and len(doc) == 5
    assert doc.token_ids[-1] == END_ID
    assert doc.evidence_tokens("X") == []


words = st.text(alphabet="abcxyz019.,;-( ", min_size=1, max_size=40)


@settings(max_examples=80, deadline=None)
@given(words, st.data())
def test_alignment_soundness_and_cover(text, data):
    s = data.draw(st.integers(0, len(text) - 1))
    e = data.draw(st.integers(s + 1, len(text)))
    rec = DocumentRecord("d", text, [CodeAnnotation("X", [(s, e)])])
    doc = tokenize_and_align(rec, Vocab.build([text]), 512)
    idx = doc.evidence_tokens("X")
    for i in idx:
        ts, te = doc.spans[i]
        assert ts < e and s < te                       # every evidence token overlaps the span
    covered = set()
    for i in idx:
        covered.update(range(*doc.spans[i]))
    for c in range(s, e):                              # every non-space evidence character recovered
        if not text[c].isspace():
            assert c in covered
    spans = doc.spans[1:-1]
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))


def test_split_words_lowercases_and_splits_punctuation():
    assert [w for w, _, _ in split_words("BP2, ok--")] == ["bp2", ",", "ok", "--"]


def test_synthetic_deterministic_and_disjoint():
    cfg = SynthConfig(n_train=50, n_val=5, n_test=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert [r.to_json() for r in a["train"]] == [r.to_json() for r in b["train"]]


def test_noise_free_single_code_docs_are_the_trigger():
    cfg = SynthConfig(n_train=20, n_val=0, n_test=0, noise_rate=0.0, codes_per_doc=1)
    recs = generate_synthetic(cfg)["train"]
    vocab = Vocab.build([r.text for r in recs])
    for r in recs:
        doc = tokenize_and_align(r, vocab, 128)
        (code,) = r.codes
        assert doc.evidence_tokens(code) == list(range(1, len(doc) - 1))


def test_label_prevalence_matches_code_prob():
    cfg = SynthConfig(n_train=10000, n_val=0, n_test=0, length=(0, 2), code_prob=0.3)
    recs = generate_synthetic(cfg)["train"]
    for j in range(cfg.num_codes):
        prev = np.mean([f"C{j:03d}" in r.codes for r in recs])
        assert abs(prev - 0.3) < 0.02


def test_evidence_spans_hold_the_trigger_phrase():
    cfg = SynthConfig(n_train=30, n_val=0, n_test=0, trigger_phrases=[["alpha beta"], ["gamma"]], num_codes=2)
    for r in generate_synthetic(cfg)["train"]:
        for a in r.annotations:
            for s, e in a.evidence:
                assert r.text[s:e] == ("alpha beta" if a.code == "C000" else "gamma")


def test_invalid_synth_configs():
    with pytest.raises(DataError):
        SynthConfig(code_prob=1.5).validate()
    with pytest.raises(DataError):
        SynthConfig.from_dict({"bogus": 1})
    with pytest.raises(DataError, match="disjoint"):
        generate_synthetic(SynthConfig(num_codes=2, trigger_phrases=[["a"], ["a"]]))


def test_trigger_longer_than_document_fails():
    cfg = SynthConfig(num_codes=1, trigger_phrases=[["a b c d e f"]], length=(0, 0), max_tokens=4)
    with pytest.raises(DataError, match="longer than"):
        generate_synthetic(cfg)


def test_default_documents_fit_128_tokens():
    splits = generate_synthetic(SynthConfig(n_train=300, n_val=0, n_test=0))
    vocab = Vocab.build([r.text for r in splits["train"]])
    assert max(len(tokenize_and_align(r, vocab, 10_000)) for r in splits["train"]) <= 128
