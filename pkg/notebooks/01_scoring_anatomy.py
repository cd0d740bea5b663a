"""How one (utterance, term) pair becomes a presence probability.

Walks through every intermediate of the scorer on a tiny random instance,
then checks the hand-written gradients against finite differences.
Run: python3 notebooks/01_scoring_anatomy.py
"""
import numpy as np

from termprobe import RetrieverParams, SpeechFeatures, TermFeatures, gradcheck, score_term

rng = np.random.default_rng(0)
d, heads = 16, 4
params = RetrieverParams.init(d, heads, rng)

# A fresh model has a zero head, so every term starts at exactly 0.5.
speech = SpeechFeatures("demo", rng.standard_normal((6, d)))
term = TermFeatures(1, rng.standard_normal((3, d)), surface="demo-term")
print("untrained probability:", score_term(params, speech, term).prob)

# Give the head some weight and look inside.
params.head_w[:] = rng.standard_normal(d)
trace = score_term(params, speech, term)
print("attention weights (heads, term tokens, frames):", trace.attn_weights.shape)
print("each query row sums to 1:", np.allclose(trace.attn_weights.sum(-1), 1.0))
print("valid term tokens pooled:", trace.M_sum)
print(f"logit {trace.logit:+.4f} -> prob {trace.prob:.4f}")

# Padding must not change the answer: append junk frames and tokens, masked out.
padded_speech = SpeechFeatures("demo", np.vstack([speech.frames, 99 * np.ones((4, d))]), np.arange(10) < 6)
padded_term = TermFeatures(1, np.vstack([term.tokens, -99 * np.ones((2, d))]), np.arange(5) < 3)
print("padded probability matches:", abs(score_term(params, padded_speech, padded_term).prob - trace.prob) < 1e-6)

# Gradients are hand-derived, so verify them numerically in float64.
for dropout in (False, True):
    report = gradcheck(d=16, heads=4, frames=5, tokens=3, seed=1, dropout=dropout)
    print(f"gradcheck dropout={dropout}: max relative error {report.max_rel_error:.2e}")
