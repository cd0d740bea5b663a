"""Evaluation: recall@k, latency against bank size and the bank-size sweep.

Uses the desk checkpoint from 03_curriculum_training.py (training it first
if missing). Takes a few minutes; the acceptance suite runs the same
protocols with more queries and seeds.
Run: python3 notebooks/05_evaluation.py
"""
from _shared import benchmark, desk_model
from termprobe import evaluate, sweep_bank_size
from termprobe.serving import bench_latency

bench = benchmark()
params = desk_model(bench)

for scorer, p in (("presence", params), ("cosine", None)):
    rep = evaluate(p, bench.test, ks=(10, 20, 30, 40, 50), scorer=scorer)
    print(f"{scorer:>8}:", "  ".join(f"@{k} {v:.1f}" for k, v in rep.recall.items()))

sizes = [583, 1000, 5000, 10000]
speech = [bench.test.speech(u) for u in bench.test.utterances]
rows = bench_latency(params, bench.test.bank.merged(bench.distractors), bench.encoder, speech, sizes,
                     queries=40, k=50)
for r in rows:
    print(f"{r.scorer:>8} m={r.bank_size:>5}: {r.mean_total_ms:7.2f} ms mean, top-k share {100 * r.topk_share:.1f}%")

# Larger banks add distractors, so recall can only hold or drop.
for pt in sweep_bank_size(params, bench.test, bench.distractors, sizes, k=50, seeds=(0, 1)):
    print(f"sweep {pt.scorer:>8} m={pt.bank_size:>5}: recall@50 {pt.recall:.1f}")
