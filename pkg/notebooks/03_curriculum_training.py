"""Training through the word -> phrase -> real-term curriculum.

Trains on the default benchmark with the desk preset (about three CPU
minutes), prints per-stage loss, and caches the checkpoint that the
retrieval and evaluation demos reuse.
Run: python3 notebooks/03_curriculum_training.py
"""
import numpy as np

from _shared import ARTIFACTS, CHECKPOINT, benchmark
from termprobe import TrainingConfig, evaluate, lr_at, run_curriculum, save_checkpoint

bench = benchmark()
cfg = TrainingConfig.desk()
print("desk preset:", f"{cfg.total_steps} steps, peak lr {cfg.peak_lr}, warmup {cfg.warmup_steps}")
print("learning rate at steps 1, 100, 750, 1500:",
      [f"{lr_at(s, cfg, cfg.total_steps):.1e}" for s in (1, 100, 750, 1500)])

result = run_curriculum(bench.train, cfg, heads=8)
print("steps per stage:", {s.value: n for s, n in result.stage_steps.items()})

losses = np.array([s["loss"] for s in result.log.steps])
stages = [s["stage"] for s in result.log.steps]
for stage in ("word", "phrase", "real_term"):
    sel = losses[[s == stage for s in stages]]
    print(f"{stage:>9}: loss {sel[:25].mean():.3f} at stage start -> {sel[-25:].mean():.3f} at stage end")

ARTIFACTS.mkdir(exist_ok=True)
save_checkpoint(CHECKPOINT, result.params)
result.log.write(ARTIFACTS / "train-log")
print("checkpoint written to", CHECKPOINT)

rep = evaluate(result.params, bench.test, ks=(10, 50))
cos = evaluate(None, bench.test, ks=(10, 50), scorer="cosine")
print(f"recall@10 presence {rep.recall[10]:.1f} vs cosine {cos.recall[10]:.1f}; "
      f"recall@50 {rep.recall[50]:.1f} vs {cos.recall[50]:.1f}")
