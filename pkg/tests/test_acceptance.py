"""Acceptance suite: one pass/fail line per criterion.

The training-based criteria share one benchmark and one full-curriculum
model (module fixtures), so the whole file takes roughly half an hour on a
single CPU core.
"""
import math
import time

import mpmath
import numpy as np
import pytest

from termprobe import numerics as nx
from termprobe.corpus import SpeechFeatures, TermFeatures, ToyEncoderConfig, build_benchmark, generate_corpus, \
    read_features, write_features
from termprobe.evalbench import AblationArm, evaluate, recall_at_k, run_ablations, sweep_bank_size
from termprobe.retriever import RetrieverParams, gradcheck, load_checkpoint, save_checkpoint, score_bank, score_term
from termprobe.serving import bench_latency, top_k_select
from termprobe.training import TrainingConfig, dual_bce_loss, lr_at, run_curriculum

KS = (10, 20, 30, 40, 50)


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="module")
def bench():
    return build_benchmark(ToyEncoderConfig(vocab_size=500, embed_dim=64, seed=0))


@pytest.fixture(scope="module")
def trained(bench):
    t0 = time.perf_counter()
    res = run_curriculum(bench.train, TrainingConfig.desk(), heads=8, dropout_p=0.1)
    train_s = time.perf_counter() - t0
    return res.params, train_s


# --------------------------------------------------------------------------


def test_c1_gradient_correctness(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, configs = 0.0, []
    for i in range(20):
        d = int(rng.choice([8, 16, 32]))
        h = int(rng.choice([1, 2, 4]))
        T = int(rng.integers(1, 9))
        L = int(rng.integers(1, 5))
        r = gradcheck(d, h, T, L, seed=i, dropout=bool(i % 2), eps=1e-4)
        worst = max(worst, r.max_rel_error)
        configs.append((d, h, T, L))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    report(capsys, 1, ok, f"max rel error {worst:.2e} over 20 configs in {elapsed:.1f}s")
    assert ok


def test_c2_oracle_equivalences(capsys):
    rng = np.random.default_rng(7)
    # (a) batched vs unbatched
    p = RetrieverParams.init(64, 8, rng)
    for name in ("bq", "bk", "bv", "bo", "head_w"):
        getattr(p, name)[:] = rng.normal(0, 0.5, 64)
    sp = SpeechFeatures("u", rng.standard_normal((40, 64)))
    terms = [TermFeatures(i, rng.standard_normal((int(rng.integers(1, 7)), 64))) for i in range(100)]
    diff_a = float(np.abs(score_bank(p, sp, terms, batch=32) - [score_term(p, sp, t).prob for t in terms]).max())

    # (b) top-k vs full sort, ties included
    mismatches = 0
    for i in range(1000):
        m = int(rng.integers(50, 10_001))
        v = rng.integers(0, m // 4 + 2, m).astype(np.float64) if i % 2 else rng.standard_normal(m)
        want = np.lexsort((np.arange(m), -v))[:50]
        mismatches += not np.array_equal(top_k_select(v, 50), want)

    # (c) kernels vs extended-precision references
    mpmath.mp.dps = 40
    a = rng.uniform(-10, 10, (6, 5))
    b = rng.uniform(-10, 10, (5, 4))
    ref = np.array([[float(mpmath.fsum(mpmath.mpf(a[i, t]) * mpmath.mpf(b[t, j]) for t in range(5)))
                     for j in range(4)] for i in range(6)])
    mm_err = float(np.abs(nx.matmul(a, b) - ref).max())
    row = [1.0, 2.0, 3.0, -4.0]
    ex = [mpmath.e ** mpmath.mpf(x) for x in row]
    sm_ref = np.array([float(e / mpmath.fsum(ex)) for e in ex])
    sm_err = float(np.abs(nx.masked_softmax_rows(np.array([row]), [1, 1, 1, 1])[0] - sm_ref).max())
    probs = rng.uniform(0.01, 0.99, (4, 6))
    labels = (rng.random((4, 6)) < 0.4).astype(int)
    labels[0, 0], labels[0, 1] = 1, 0
    pos = [mpmath.log(mpmath.mpf(x)) for x, y in zip(probs.ravel(), labels.ravel()) if y]
    neg = [mpmath.log(1 - mpmath.mpf(x)) for x, y in zip(probs.ravel(), labels.ravel()) if not y]
    loss_ref = float(-mpmath.fsum(pos) / len(pos) - mpmath.fsum(neg) / len(neg))
    loss_err = abs(dual_bce_loss(probs, labels)[0] - loss_ref)
    sig_err = abs(nx.sigmoid(1.0) - float(1 / (1 + mpmath.e ** -1)))

    ok = diff_a < 1e-6 and mismatches == 0 and mm_err < 1e-6 and sm_err < 1e-12 and loss_err < 1e-12 \
        and sig_err < 1e-15
    report(capsys, 2, ok, f"(a) max |batched-single| {diff_a:.1e}; (b) {mismatches}/1000 top-k mismatches; "
                          f"(c) matmul {mm_err:.1e}, softmax {sm_err:.1e}, loss {loss_err:.1e}, sigmoid {sig_err:.1e}")
    assert ok


def test_c3_analytic_baselines(capsys):
    rng = np.random.default_rng(0)
    p = RetrieverParams.init(64, 8, rng)
    sp = SpeechFeatures("u", rng.standard_normal((30, 64)))
    terms = [TermFeatures(i, rng.standard_normal((int(rng.integers(1, 5)), 64))) for i in range(20)]
    probs = score_bank(p, sp, terms)
    labels = np.zeros(20, int)
    labels[:5] = 1
    loss = dual_bce_loss(probs, labels)[0]
    cfg = TrainingConfig()
    lr1, lr500 = lr_at(1, cfg, 10_000), lr_at(500, cfg, 10_000)
    ok = bool((probs == 0.5).all()) and abs(loss - 2 * math.log(2)) < 1e-6 \
        and math.isclose(lr1, 1e-7) and math.isclose(lr500, 1e-4)
    report(capsys, 3, ok, f"zero head probs all 0.5: {bool((probs == 0.5).all())}; loss {loss:.7f} "
                          f"(2 ln 2 = {2 * math.log(2):.7f}); lr(1) {lr1:.1e}, lr(500) {lr500:.1e}")
    assert ok


def test_c4_end_to_end_recall(capsys, bench, trained):
    params, train_s = trained
    t0 = time.perf_counter()
    rep = evaluate(params, bench.test, ks=KS)
    cos = evaluate(None, bench.test, ks=KS, scorer="cosine")
    total = train_s + time.perf_counter() - t0
    r10, r50, c10 = rep.recall[10], rep.recall[50], cos.recall[10]
    ok = r10 >= 85 and r50 >= 95 and r10 - c10 >= 10 and total <= 15 * 60
    report(capsys, 4, ok, f"recall@10 {r10:.2f}, recall@50 {r50:.2f}, cosine recall@10 {c10:.2f} "
                          f"(gap {r10 - c10:.2f}); bank {len(bench.test.bank)}; {total / 60:.1f} min")
    assert ok


def test_c5_ablation_orderings(capsys, bench, trained):
    params, _ = trained
    cfg = TrainingConfig.desk()
    full = evaluate(params, bench.test, ks=KS)
    arms = [AblationArm.REAL_TERM_ONLY, AblationArm.PHRASE_ONLY, AblationArm.WORD_ONLY, AblationArm.NO_POOLING]
    results = {r.arm: r for r in run_ablations(bench, cfg, arms, heads=8, dropout_p=0.1, ks=KS)}
    at = {a: (results[a].report.recall if results[a].report else None) for a in arms}
    at[AblationArm.FULL] = full.recall
    failed = [a.value for a, r in at.items() if r is None]
    chance10 = 100.0 * 10 / len(bench.test.bank)
    order = [AblationArm.FULL, AblationArm.REAL_TERM_ONLY, AblationArm.PHRASE_ONLY, AblationArm.WORD_ONLY]
    ordered = not failed and all(at[a][50] > at[b][50] for a, b in zip(order, order[1:]))
    nopool_ok = not failed and at[AblationArm.NO_POOLING][10] < 5 * chance10
    detail = ", ".join(f"{a.value} @10 {r[10]:.2f} @50 {r[50]:.2f}" if r else f"{a.value} failed"
                       for a, r in at.items())
    report(capsys, 5, ordered and nopool_ok,
           f"ordering full>realonly>phrase>word at k=50: {ordered}; nopool @10 < 5x chance "
           f"({5 * chance10:.2f}): {nopool_ok}; {detail}")
    assert ordered and nopool_ok


def test_c6_latency_shape(capsys, bench, trained):
    params, _ = trained
    sizes = [583, 1000, 5000, 10000]
    bank = bench.test.bank.merged(bench.distractors)
    speech = [bench.test.speech(u) for u in bench.test.utterances]
    rows = bench_latency(params, bank, bench.encoder, speech, sizes, queries=200, k=50)
    pres = [r for r in rows if r.scorer == "presence"]
    cos = [r for r in rows if r.scorer == "cosine"]
    tot = np.array([r.mean_total_ms for r in pres])
    sc = np.array([r.mean_scoring_ms for r in pres])
    monotone = bool(np.all(np.diff(tot) > 0))
    slope, icpt = np.polyfit(sizes, sc, 1)
    fit = slope * np.array(sizes) + icpt
    dev = float(np.max(np.abs(sc - fit) / fit))
    growth_p = pres[-1].mean_total_ms - pres[0].mean_total_ms
    growth_c = cos[-1].mean_total_ms - cos[0].mean_total_ms
    slower = growth_c < 0.1 * growth_p
    share = ", ".join(f"{r.bank_size}: {100 * r.topk_share:.1f}%" for r in pres)
    ok = monotone and dev <= 0.30 and slower
    report(capsys, 6, ok, f"presence total ms {np.round(tot, 2).tolist()} monotone={monotone}; scoring max "
                          f"deviation from linear fit {100 * dev:.1f}%; cosine growth {growth_c:.2f} ms vs "
                          f"presence {growth_p:.2f} ms; top-k share {share}")
    assert ok


def test_c7_invariants(capsys, tmp_path):
    rng = np.random.default_rng(11)
    checks = {}
    # padding invariance
    p = RetrieverParams.init(32, 4, rng)
    for name in ("bq", "bk", "bv", "bo", "head_w"):
        getattr(p, name)[:] = rng.normal(0, 0.5, 32)
    worst = 0.0
    for _ in range(50):
        T, L = int(rng.integers(1, 12)), int(rng.integers(1, 6))
        fr, tk = rng.standard_normal((T, 32)), rng.standard_normal((L, 32))
        a = score_term(p, SpeechFeatures("u", fr), TermFeatures(0, tk)).prob
        fr2 = np.vstack([fr, 50 * rng.standard_normal((int(rng.integers(1, 6)), 32))])
        tk2 = np.vstack([tk, 50 * rng.standard_normal((int(rng.integers(1, 4)), 32))])
        b = score_term(p, SpeechFeatures("u", fr2, np.arange(len(fr2)) < T),
                       TermFeatures(0, tk2, np.arange(len(tk2)) < L)).prob
        worst = max(worst, abs(a - b))
    checks["padding"] = worst < 1e-6
    # softmax rows
    s = rng.normal(0, 20, (200, 30)).astype(np.float32)
    mask = rng.random(30) < 0.7
    mask[0] = True
    out = nx.masked_softmax_rows(s, mask)
    checks["softmax"] = bool(np.abs(out.sum(1, dtype=np.float64) - 1).max() < 1e-6 and (out[:, ~mask] == 0).all())
    # recall monotone in k
    ranked = [rng.permutation(100).tolist() for _ in range(30)]
    gold = [set(rng.choice(100, 3, replace=False).tolist()) for _ in range(30)]
    vals = [recall_at_k(ranked, gold, k) for k in range(1, 101)]
    checks["recall_monotone"] = all(x <= y for x, y in zip(vals, vals[1:]))
    # round trips
    save_checkpoint(tmp_path / "m.ckpt", p)
    back = load_checkpoint(tmp_path / "m.ckpt")
    checks["checkpoint"] = all(getattr(back, n).tobytes() == a.astype(np.float32).tobytes()
                               for n, a in p.tensors().items())
    frames = rng.standard_normal((17, 32)).astype(np.float32)
    write_features(tmp_path / "f.a2pf", frames)
    checks["features"] = read_features(tmp_path / "f.a2pf").frames.tobytes() == frames.tobytes()
    # training determinism over a whole (short) curriculum
    corpus, _ = generate_corpus(ToyEncoderConfig(vocab_size=120, embed_dim=32, seed=5), 64, 40)
    cfg = TrainingConfig.desk(total_steps=30, warmup_steps=5, batch_size=16)
    r1 = run_curriculum(corpus, cfg, heads=4)
    r2 = run_curriculum(corpus, cfg, heads=4)
    checks["determinism"] = [s["loss"] for s in r1.log.steps] == [s["loss"] for s in r2.log.steps] and all(
        a.tobytes() == r2.params.tensors()[n].tobytes() for n, a in r1.params.tensors().items())
    ok = all(checks.values())
    report(capsys, 7, ok, ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert ok


def test_c8_bank_size_sweep(capsys, bench, trained):
    params, _ = trained
    sizes = [583, 1000, 5000, 10000]
    pts = sweep_bank_size(params, bench.test, bench.distractors, sizes, k=50, seeds=(0, 1, 2))
    curves = {s: [p.recall for p in pts if p.scorer == s] for s in ("presence", "cosine")}
    ok = all(all(a >= b for a, b in zip(c, c[1:])) for c in curves.values())
    report(capsys, 8, ok, "; ".join(f"{s} recall@50 " + " -> ".join(f"{v:.2f}" for v in c)
                                    for s, c in curves.items()) + " (mean of 3 seeds)")
    assert ok
