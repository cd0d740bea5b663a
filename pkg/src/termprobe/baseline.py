"""Cosine-similarity retrieval over mean-pooled vectors (the vector-database baseline).

An exact scan replaces an approximate index: at these bank sizes it is cheap
and keeps index error out of recall comparisons.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import SpeechFeatures, TermBank, TermFeatures, ToyEncoder
from .serving import RetrievalResult, RetrievedTerm, Timing, top_k_select


class DegenerateEmbeddingError(ValueError):
    pass


def embed_for_index(features: np.ndarray, mask=None) -> np.ndarray:
    """Mean over the valid rows, scaled to unit L2 norm (float64)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {x.shape}")
    m = np.ones(x.shape[0], bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise DegenerateEmbeddingError("no valid rows to pool")
    v = x[m].mean(axis=0)
    norm = np.linalg.norm(v)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateEmbeddingError("pooled vector has zero norm")
    return v / norm


@dataclass
class DenseIndex:
    vectors: np.ndarray  # (m, d) unit rows, ascending term id
    ids: np.ndarray
    entries: list

    @classmethod
    def build(cls, bank: TermBank, encoder: ToyEncoder,
              features: Sequence[TermFeatures] | None = None) -> "DenseIndex":
        feats = list(features) if features is not None else encoder.bank_features(bank)
        if not feats:
            raise ValueError("cannot index an empty bank")
        feats.sort(key=lambda f: f.term_id)
        vecs = np.stack([embed_for_index(f.tokens, f.token_mask) for f in feats])
        ids = np.array([f.term_id for f in feats], dtype=np.int64)
        return cls(vecs, ids, [bank[int(i)] for i in ids])

    def __len__(self) -> int:
        return len(self.ids)


def cosine_retrieve(index: DenseIndex, speech: SpeechFeatures, k: int) -> RetrievalResult:
    """Top-k terms by cosine similarity to the pooled utterance vector."""
    if len(index) == 0:
        raise ValueError("index is empty")
    t0 = time.perf_counter()
    query = embed_for_index(speech.frames, speech.frame_mask)
    t1 = time.perf_counter()
    scores = index.vectors @ query
    t2 = time.perf_counter()
    idx = top_k_select(scores, k)
    t3 = time.perf_counter()
    entries = [RetrievedTerm(int(index.ids[i]), index.entries[i].src, index.entries[i].tgt,
                             float(scores[i]), r) for r, i in enumerate(idx, 1)]
    t4 = time.perf_counter()
    timing = Timing((t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3, (t4 - t0) * 1e3)
    return RetrievalResult(entries, timing, scorer="cosine")
