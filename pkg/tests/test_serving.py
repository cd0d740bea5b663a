import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from termprobe.baseline import DegenerateEmbeddingError, DenseIndex, cosine_retrieve, embed_for_index
from termprobe.corpus import SpeechFeatures, Stage, ToyEncoderConfig, generate_corpus
from termprobe.retriever import RetrieverParams, score_bank
from termprobe.serving import (BankHandle, PreparedBank, PromptTemplate, RetrievedTerm, bench_latency,
                               build_prompt, retrieve, top_k_heap, top_k_select, write_latency_csv)


def full_sort(values, k):
    v = np.asarray(values)
    return sorted(range(len(v)), key=lambda i: (-v[i], i))[:k]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 300), elements=st.sampled_from([0.0, 0.5, 1.0, -1.0, 2.0]) | st.floats(-5, 5)),
       st.integers(1, 60))
def test_top_k_matches_full_sort_with_ties(values, k):
    want = full_sort(values, k)
    assert top_k_select(values, k).tolist() == want
    assert top_k_heap(values, k) == want


def test_top_k_edge_cases():
    assert top_k_select([3.0, 1.0], 5).tolist() == [0, 1]
    assert top_k_select([1.0, 1.0, 1.0], 2).tolist() == [0, 1]
    with pytest.raises(ValueError):
        top_k_select([1.0], 0)
    with pytest.raises(ValueError):
        top_k_heap([1.0], 0)


@pytest.fixture(scope="module")
def setup():
    cfg = ToyEncoderConfig(vocab_size=100, embed_dim=16, seed=5)
    corpus, bank = generate_corpus(cfg, 12, 60)
    rng = np.random.default_rng(0)
    p = RetrieverParams.init(16, 4, rng)
    p.head_w[:] = rng.standard_normal(16)
    return corpus, bank, p


def test_retrieve_orders_by_probability(setup):
    corpus, bank, p = setup
    prepared = PreparedBank(bank, corpus.encoder, batch=16)
    sp = corpus.speech(corpus.utterances[0])
    res = retrieve(p, sp, prepared, 10)
    probs = score_bank(p, sp, corpus.encoder.bank_features(bank))
    order = full_sort(probs, 10)
    assert res.term_ids == [bank.entries[i].term_id for i in order]
    assert [e.rank for e in res.entries] == list(range(1, 11))
    assert all(a.prob >= b.prob for a, b in zip(res.entries, res.entries[1:]))
    t = res.timing
    assert t.total_ms >= t.scoring_ms + t.topk_ms + t.feature_ms - 1e-6


def test_zero_head_ties_break_by_term_id(setup):
    corpus, bank, _ = setup
    p = RetrieverParams.init(16, 4, np.random.default_rng(0))
    res = retrieve(p, corpus.speech(corpus.utterances[0]), PreparedBank(bank, corpus.encoder), 5)
    assert res.term_ids == sorted(bank.ids)[:5]
    assert all(e.prob == 0.5 for e in res.entries)


def test_bank_handle_swap(setup):
    corpus, bank, p = setup
    handle = BankHandle(PreparedBank(bank.subset(bank.ids[:10]), corpus.encoder))
    sp = corpus.speech(corpus.utterances[1])
    assert len(retrieve(p, sp, handle, 50).entries) == 10
    assert handle.swap(PreparedBank(bank, corpus.encoder)) == 2
    assert len(retrieve(p, sp, handle, 50).entries) == 50


def test_empty_bank_is_rejected(setup):
    from termprobe.corpus import TermBank
    corpus, _, _ = setup
    with pytest.raises(ValueError):
        PreparedBank(TermBank([]), corpus.encoder)


def test_prompts():
    tpl = PromptTemplate()
    items = [RetrievedTerm(1, "Ba-ke", "AB·EK", 0.9, 1), RetrievedTerm(2, "Lo", "OL", 0.8, 2)]
    asr = build_prompt(tpl, "asr", items)
    assert asr.startswith("This is an English audio recording. Please transcribe")
    assert asr.endswith("Potential technical terms include: Ba-ke, Lo.")
    st_prompt = build_prompt(tpl, "st", items)
    assert "into Chinese text" in st_prompt and "Ba-ke→AB·EK" in st_prompt
    assert "→" not in build_prompt(PromptTemplate(show_pairs=False), "st", items)
    assert build_prompt(tpl, "asr", []) == tpl.instruction("asr")
    with pytest.raises(ValueError):
        build_prompt(tpl, "mt", items)


def test_cosine_matches_exhaustive_scan(setup):
    corpus, bank, _ = setup
    index = DenseIndex.build(bank, corpus.encoder)
    sp = corpus.speech(corpus.utterances[2])
    q = sp.frames.astype(np.float64).mean(0)
    q /= np.linalg.norm(q)
    sims = []
    for e in sorted(bank, key=lambda e: e.term_id):
        v = corpus.encoder.embed_tokens(e.token_ids).astype(np.float64).mean(0)
        sims.append(float(q @ v / np.linalg.norm(v)))
    res = cosine_retrieve(index, sp, 7)
    ids = sorted(bank.ids)
    assert res.term_ids == [ids[i] for i in full_sort(sims, 7)]
    assert res.entries[0].prob == pytest.approx(max(sims), abs=1e-12)
    d = res.to_dict()
    assert d["scorer"] == "cosine" and d["score_kind"] == "similarity"
    json.dumps(d)


def test_embed_for_index():
    v = embed_for_index(np.array([[3.0, 0.0], [5.0, 0.0], [100.0, 100.0]]), [1, 1, 0])
    np.testing.assert_allclose(v, [1.0, 0.0])
    with pytest.raises(DegenerateEmbeddingError):
        embed_for_index(np.zeros((2, 3)))
    with pytest.raises(DegenerateEmbeddingError):
        embed_for_index(np.ones((2, 3)), [0, 0])


def test_bench_latency_rows(setup):
    corpus, bank, p = setup
    speech = [corpus.speech(u) for u in corpus.utterances]
    rows = bench_latency(p, bank, corpus.encoder, speech, [20, 60], queries=30, k=5, warmup=1)
    assert [(r.bank_size, r.scorer) for r in rows] == [(20, "presence"), (20, "cosine"),
                                                        (60, "presence"), (60, "cosine")]
    assert all(0 <= r.topk_share <= 1 and r.queries == 30 for r in rows)
    buf = io.StringIO()
    write_latency_csv(rows, buf)
    assert buf.getvalue().splitlines()[0].startswith("bank_size,scorer")
    with pytest.raises(ValueError):
        bench_latency(p, bank, corpus.encoder, speech, [1000], queries=30)
