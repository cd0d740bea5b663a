"""The toy speech encoder and the benchmark it produces.

Speech frames are token embeddings repeated 1-3 times, with filler frames
and Gaussian noise in between. Term banks, curriculum stages and the
on-disk layout are all shown here.
Run: python3 notebooks/02_synthetic_corpus.py
"""
import tempfile
from termprobe import ToyEncoderConfig, build_benchmark
from termprobe import Stage
from termprobe.corpus import load_corpus, save_corpus
from termprobe.training import stage_pool

cfg = ToyEncoderConfig(vocab_size=300, embed_dim=32, seed=3)
bench = build_benchmark(cfg, n_train=200, n_test=40, test_bank_size=120, train_bank_size=300, n_distractors=500)

utt = bench.test.utterances[0]
print("transcript token ids:", utt.token_ids)
for span in utt.terms:
    entry = bench.test.bank[span.term_id]
    print(f"  term {entry.term_id} '{entry.src}' (-> '{entry.tgt}') at tokens [{span.start}, {span.end})")
sp = bench.test.speech(utt)
print(f"{len(utt.token_ids)} tokens rendered as {sp.n_valid} frames of dim {sp.frames.shape[1]}")

# Word and phrase stages sample pseudo-terms from any transcript; the real-term stage needs annotated terms.
print("train utterances usable per stage:", {s.value: len(stage_pool(bench.train, s)) for s in Stage})
print("bank sizes: train", len(bench.train.bank), "test", len(bench.test.bank), "distractors", len(bench.distractors))
print("train/test banks disjoint:", not set(bench.train.bank.ids) & set(bench.test.bank.ids))

with tempfile.TemporaryDirectory() as tmp:
    save_corpus(tmp, bench.test)
    again = load_corpus(tmp)
    print("save/load round trip keeps the digest:", again.digest() == bench.test.digest())

same = build_benchmark(cfg, n_train=200, n_test=40, test_bank_size=120, train_bank_size=300, n_distractors=500)
print("same seed, same corpus:", same.test.digest() == bench.test.digest())
