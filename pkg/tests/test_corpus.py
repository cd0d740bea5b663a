import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from termprobe.corpus import (BankError, CapacityError, FeatureFormatError, SkipUtterance, SpeechFeatures, Stage,
                              TermBank, TermEntry, TermFeatures, ToyEncoder, ToyEncoderConfig, annotate,
                              build_benchmark, contains, decode_features, generate_corpus, load_corpus,
                              make_bank, read_features, sample_stage_terms, save_corpus, term_surfaces,
                              token_surface, write_features)


def naive_find(hay, needle):
    for i in range(len(hay)):
        if list(hay[i:i + len(needle)]) == list(needle):
            return i
    return -1


@pytest.fixture(scope="module")
def small():
    cfg = ToyEncoderConfig(vocab_size=80, embed_dim=16, seed=3)
    corpus, bank = generate_corpus(cfg, 40, 30)
    return cfg, corpus, bank


def test_noiseless_encoder_is_the_embedding_table():
    cfg = ToyEncoderConfig(vocab_size=60, embed_dim=8, noise_sigma=0, filler_rate=0, frames_per_token=(1, 1))
    enc = ToyEncoder(cfg)
    toks = [3, 17, 3, 59]
    np.testing.assert_array_equal(enc.render(toks, np.random.default_rng(0)), enc.token_table[toks])


def test_render_repeats_and_fillers():
    cfg = ToyEncoderConfig(vocab_size=60, embed_dim=8, noise_sigma=0, filler_rate=0.5)
    enc = ToyEncoder(cfg)
    frames = enc.render([1, 2, 3], np.random.default_rng(1))
    # every frame is either a token row or a filler row
    for f in frames:
        assert any((f == r).all() for r in enc.table[[1, 2, 3, 60, 61, 62, 63]])
    assert 3 <= len(frames) <= 3 * 3 + 4


def test_generation_is_deterministic(small):
    cfg, corpus, _ = small
    again, _ = generate_corpus(cfg, 40, 30)
    assert corpus.digest() == again.digest()
    other, _ = generate_corpus(ToyEncoderConfig(vocab_size=80, embed_dim=16, seed=4), 40, 30)
    assert other.digest() != corpus.digest()


def test_annotations_agree_with_substring_scan(small):
    _, corpus, bank = small
    for u in corpus.utterances:
        for s in u.terms:
            assert tuple(u.token_ids[s.start:s.end]) == bank[s.term_id].token_ids
        present = {e.term_id for e in bank if naive_find(u.token_ids, e.token_ids) >= 0}
        assert present == u.positive_ids


def test_real_term_corpus_has_terms(small):
    _, corpus, _ = small
    assert all(u.terms for u in corpus.utterances)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=15), st.lists(st.integers(0, 4), min_size=1, max_size=4))
def test_contains_matches_naive_scan(hay, needle):
    assert contains(hay, needle) == naive_find(hay, needle)


def test_annotate_finds_overlapping_terms():
    bank = make_bank([(1, 2), (2, 3), (5,)])
    spans = annotate([0, 1, 2, 3, 4], bank)
    assert [(s.term_id, s.start, s.end) for s in spans] == [(0, 1, 3), (1, 2, 4)]


def test_bank_rejects_duplicates_and_empties():
    e = TermEntry(1, "A", "a", (1, 2))
    with pytest.raises(BankError):
        TermBank([e, TermEntry(1, "B", "b", (3,))])
    with pytest.raises(BankError):
        TermBank([e, TermEntry(2, "B", "b", (1, 2))])
    with pytest.raises(BankError):
        TermBank([TermEntry(3, "C", "c", ())])


def test_bank_jsonl_round_trip(tmp_path, small):
    _, _, bank = small
    bank.to_jsonl(tmp_path / "b.jsonl")
    back = TermBank.from_jsonl(tmp_path / "b.jsonl")
    assert [(e.term_id, e.src, e.tgt, e.token_ids) for e in back] == [(e.term_id, e.src, e.tgt, e.token_ids) for e in bank]


def test_surfaces_are_injective():
    names = {token_surface(i) for i in range(5000)}
    assert len(names) == 5000
    assert term_surfaces((0, 1))[0] != term_surfaces((1, 0))[0]


def test_capacity_error_for_oversized_bank():
    cfg = ToyEncoderConfig(vocab_size=50, embed_dim=8, term_lengths=(1.0,))
    with pytest.raises(CapacityError):
        generate_corpus(cfg, 5, 60)


def test_stage_samplers(small):
    _, corpus, _ = small
    rng = np.random.default_rng(0)
    u = corpus.utterances[0]
    for stage, max_len in ((Stage.WORD, 1), (Stage.PHRASE, 4)):
        terms = sample_stage_terms(u, stage, rng)
        assert 1 <= len(terms) <= 3
        for t in terms:
            assert 1 <= len(t.tokens) <= max_len
            assert tuple(u.token_ids[t.start:t.start + len(t.tokens)]) == t.tokens
    real = sample_stage_terms(u, Stage.REAL_TERM, rng)
    assert {t.term_id for t in real} == u.positive_ids


def test_real_stage_skips_unannotated():
    cfg = ToyEncoderConfig(vocab_size=80, embed_dim=8)
    corpus, _ = generate_corpus(cfg, 5, 20, {Stage.WORD: 1.0})
    bare = [u for u in corpus.utterances if not u.terms]
    assert bare
    with pytest.raises(SkipUtterance):
        sample_stage_terms(bare[0], Stage.REAL_TERM, np.random.default_rng(0))


def test_feature_file_round_trip_is_bit_exact(tmp_path):
    a = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    write_features(tmp_path / "x.a2pf", a)
    back = read_features(tmp_path / "x.a2pf")
    assert back.frames.tobytes() == a.tobytes()


def test_feature_file_errors(tmp_path):
    a = np.ones((4, 3), np.float32)
    write_features(tmp_path / "x.a2pf", a)
    raw = (tmp_path / "x.a2pf").read_bytes()
    with pytest.raises(FeatureFormatError, match="offset"):
        decode_features(raw[:-5])
    with pytest.raises(FeatureFormatError) as exc:
        decode_features(raw + b"\0")
    assert exc.value.offset == len(raw)
    with pytest.raises(FeatureFormatError):
        decode_features(b"NOPE" + raw[4:])
    with pytest.raises(FeatureFormatError):
        decode_features(raw[:6])


def test_masks_must_be_valid_prefixes():
    with pytest.raises(ValueError):
        SpeechFeatures("u", np.ones((3, 2)), [1, 0, 1])
    with pytest.raises(ValueError):
        TermFeatures(0, np.ones((2, 2)), [0, 0])


def test_corpus_directory_round_trip(tmp_path, small):
    _, corpus, _ = small
    save_corpus(tmp_path / "c", corpus)
    back = load_corpus(tmp_path / "c")
    assert back.digest() == corpus.digest()


def test_benchmark_split_properties():
    cfg = ToyEncoderConfig(vocab_size=200, embed_dim=8, seed=1)
    bm = build_benchmark(cfg, n_train=60, n_test=30, test_bank_size=50, train_bank_size=80, n_distractors=200)
    train_seqs = {e.token_ids for e in bm.train.bank}
    test_seqs = {e.token_ids for e in bm.test.bank}
    assert not train_seqs & test_seqs
    assert len(bm.distractors) == 200
    assert not set(bm.distractors.ids) & set(bm.test.bank.ids)
    for e in bm.distractors:
        assert len(e.token_ids) > 1
        assert all(contains(u.token_ids, e.token_ids) < 0 for u in bm.test.utterances)
    assert all(u.terms for u in bm.test.utterances)
