"""Serving: top-k retrieval from a term bank and the downstream prompt.

Prepares the test bank (and the bank with distractors) once, retrieves
for one utterance, shows where gold terms rank as the bank grows, and
renders ASR and ST prompts. Reuses the checkpoint
from 03_curriculum_training.py (training it first if missing).
Run: python3 notebooks/04_retrieval_and_prompts.py
"""
import numpy as np

from _shared import benchmark, desk_model
from termprobe import DenseIndex, PreparedBank, PromptTemplate, build_prompt, cosine_retrieve, retrieve
from termprobe.numerics import sigmoid
from termprobe.serving import bank_scores

bench = benchmark()
params = desk_model(bench)

utt = bench.test.utterances[0]
speech = bench.test.speech(utt)
print("gold terms:", sorted(bench.test.bank[t].src for t in utt.positive_ids))

# Prepare each bank once; serving then only scores and selects.
small = PreparedBank(bench.test.bank, bench.encoder)
large = PreparedBank(bench.test.bank.merged(bench.distractors), bench.encoder)

res = retrieve(params, speech, small, k=8)
for e in res.entries:
    print(f"  #{e.rank} {e.src:<34} p={e.prob:.4f} {'gold' if e.term_id in utt.positive_ids else ''}")
t = res.timing
print(f"scoring {t.scoring_ms:.1f} ms, top-k {t.topk_ms:.3f} ms over {len(small)} terms")

# Distractors share subwords with gold terms; probabilities saturate and
# near-misses can outrank the true term. Where do the gold terms land?
for name, bank in (("test bank", small), ("with distractors", large)):
    probs = sigmoid(bank_scores(params, speech, bank))
    ids = np.array(bank.bank.ids)
    order = np.lexsort((ids, -probs))
    ranks = [int(np.flatnonzero(ids[order] == g)[0]) + 1 for g in sorted(utt.positive_ids)]
    print(f"{name:>16} (m={len(bank)}): gold ranks {ranks}, terms with p > 0.99: {int((probs > 0.99).sum())}")

index = DenseIndex.build(large.bank, bench.encoder)
cos = cosine_retrieve(index, speech, 50)
print("cosine top-50 gold hits with distractors:", sum(e.term_id in utt.positive_ids for e in cos.entries))

top3 = res.entries[:3]
print(build_prompt(PromptTemplate(), "asr", top3))
print(build_prompt(PromptTemplate(), "st", top3))
print(build_prompt(PromptTemplate(show_pairs=False), "st", top3))
