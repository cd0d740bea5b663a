"""Inference path: bank scoring, Top-k selection, timing and prompt assembly."""
from __future__ import annotations

import csv
import heapq
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import SpeechFeatures, TermBank, TermFeatures, ToyEncoder, substream
from .numerics import sigmoid
from .retriever import POOLING_EPS, BatchScorer, RetrieverParams, pad_stack


@dataclass
class RetrievedTerm:
    term_id: int
    src: str
    tgt: str
    prob: float
    rank: int


@dataclass
class Timing:
    feature_ms: float = 0.0
    scoring_ms: float = 0.0
    topk_ms: float = 0.0
    total_ms: float = 0.0


@dataclass
class RetrievalResult:
    entries: list[RetrievedTerm]
    timing: Timing = field(default_factory=Timing)
    scorer: str = "presence"

    @property
    def term_ids(self) -> list[int]:
        return [e.term_id for e in self.entries]

    def to_dict(self) -> dict:
        out = {"scorer": self.scorer, "entries": [asdict(e) for e in self.entries],
               "timing": asdict(self.timing)}
        if self.scorer == "cosine":
            # scores are cosine similarities, not probabilities
            out["score_kind"] = "similarity"
        return out


# --------------------------------------------------------------------------
# Top-k


def top_k_select(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, descending; ties go to the lower index.

    Introselect partition (O(m)) followed by sorting only the survivors
    (O(k log k)). Values equal to the k-th largest are admitted in index order,
    so the result equals a stable full sort truncated to ``k``.
    """
    v = np.asarray(values)
    m = v.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= m:
        return np.lexsort((np.arange(m), -v))
    kth = np.partition(v, m - k)[m - k]
    above = np.flatnonzero(v > kth)
    ties = np.flatnonzero(v == kth)[: k - above.size]
    picked = np.concatenate([above, ties])
    return picked[np.lexsort((picked, -v[picked]))]


def top_k_heap(values: Sequence[float], k: int) -> list[int]:
    """Bounded min-heap variant of :func:`top_k_select` (O(m log k), pure Python)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    heap: list[tuple[float, int]] = []
    for i, x in enumerate(values):
        item = (float(x), -i)  # on equal value the lower index is "larger"
        if len(heap) < k:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    return [-i for _, i in sorted(heap, reverse=True)]


# --------------------------------------------------------------------------
# bank preparation


class PreparedBank:
    """Term features stacked into padded blocks once, in ascending term-id order.

    Keeping id order means index tie-breaks in :func:`top_k_select` are
    term-id tie-breaks.
    """

    def __init__(self, bank: TermBank, encoder: ToyEncoder, batch: int = 512,
                 features: Sequence[TermFeatures] | None = None):
        if len(bank) == 0:
            raise ValueError("term bank is empty")
        feats = list(features) if features is not None else encoder.bank_features(bank)
        order = np.argsort(np.array([f.term_id for f in feats]), kind="stable")
        self.features = [feats[i] for i in order]
        self.entries = [bank[f.term_id] for f in self.features]
        self.ids = np.array([e.term_id for e in self.entries], dtype=np.int64)
        self.bank = bank
        self.encoder = encoder
        self.batch = batch
        self.blocks = []
        for lo in range(0, len(self.features), batch):
            chunk = self.features[lo:lo + batch]
            self.blocks.append(pad_stack([f.tokens for f in chunk], [f.token_mask for f in chunk]))

    def __len__(self) -> int:
        return len(self.entries)


class BankHandle:
    """Copy-and-replace holder: readers take the current bank, writers swap in a new one."""

    def __init__(self, bank: PreparedBank):
        self._bank = bank
        self.version = 1
        self._lock = threading.Lock()

    def current(self) -> tuple[PreparedBank, int]:
        with self._lock:
            return self._bank, self.version

    def swap(self, bank: PreparedBank) -> int:
        with self._lock:
            self._bank = bank
            self.version += 1
            return self.version


def _speech_block(speech: SpeechFeatures, dtype):
    return pad_stack([speech.frames], [speech.frame_mask], dtype)


def bank_scores(params: RetrieverParams, speech: SpeechFeatures, bank: PreparedBank,
                eps: float = POOLING_EPS, pooling: bool = True) -> np.ndarray:
    """Logits for every bank term (in ``bank.ids`` order)."""
    scorer = BatchScorer(params, eps, pooling)
    S, Sm = _speech_block(speech, params.dtype)
    return np.concatenate([scorer.forward(S, Sm, T, Tm)[0] for T, Tm in bank.blocks])


def retrieve(params: RetrieverParams, speech: SpeechFeatures, bank: PreparedBank | BankHandle,
             k: int, eps: float = POOLING_EPS, pooling: bool = True) -> RetrievalResult:
    """Score the bank, keep the Top-k by descending probability, time each stage.

    Ranking uses the logits (same order as the probabilities, without
    saturation); equal scores go to the lower term id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    t0 = time.perf_counter()
    if isinstance(bank, BankHandle):
        bank, _ = bank.current()
    scorer = BatchScorer(params, eps, pooling)
    S, Sm = _speech_block(speech, params.dtype)
    t1 = time.perf_counter()
    logits = np.concatenate([scorer.forward(S, Sm, T, Tm)[0] for T, Tm in bank.blocks])
    t2 = time.perf_counter()
    idx = top_k_select(logits, k)
    t3 = time.perf_counter()
    probs = sigmoid(logits[idx])
    entries = [RetrievedTerm(int(bank.ids[i]), bank.entries[i].src, bank.entries[i].tgt, float(p), r)
               for r, (i, p) in enumerate(zip(idx, np.atleast_1d(probs)), 1)]
    t4 = time.perf_counter()
    timing = Timing((t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3, (t4 - t0) * 1e3)
    return RetrievalResult(entries, timing)


# --------------------------------------------------------------------------
# prompts


@dataclass
class PromptTemplate:
    src_lang: str = "English"
    tgt_lang: str = "Chinese"
    show_pairs: bool = True  # translation prompts: "src→tgt" instead of source terms only

    def instruction(self, task: str) -> str:
        if task == "asr":
            return (f"This is an {self.src_lang} audio recording. Please transcribe this audio into "
                    f"{self.src_lang} text. Specialized terminology may appear in the audio. "
                    "Please accurately recognize these terms.")
        if task == "st":
            return (f"This is an {self.src_lang} audio recording. Please translate this audio into "
                    f"{self.tgt_lang} text. Specialized terminology may appear in the audio. "
                    "Please accurately translate these terms.")
        raise ValueError(f"unknown task {task!r}; expected 'asr' or 'st'")


def build_prompt(template: PromptTemplate, task: str, retrieved: RetrievalResult | Iterable[RetrievedTerm]) -> str:
    entries = retrieved.entries if isinstance(retrieved, RetrievalResult) else list(retrieved)
    text = template.instruction(task)
    if not entries:
        return text
    if task == "st" and template.show_pairs:
        items = [f"{e.src}→{e.tgt}" for e in entries]
    else:
        items = [e.src for e in entries]
    return f"{text} Potential technical terms include: {', '.join(items)}."


# --------------------------------------------------------------------------
# latency bench


@dataclass
class LatencyRow:
    bank_size: int
    scorer: str
    queries: int
    mean_feature_ms: float
    mean_scoring_ms: float
    mean_topk_ms: float
    mean_total_ms: float
    p95_total_ms: float
    topk_share: float


def _summarise(bank_size: int, scorer: str, timings: list[Timing]) -> LatencyRow:
    f = np.array([t.feature_ms for t in timings])
    s = np.array([t.scoring_ms for t in timings])
    k = np.array([t.topk_ms for t in timings])
    tot = np.array([t.total_ms for t in timings])
    return LatencyRow(bank_size, scorer, len(timings), float(f.mean()), float(s.mean()), float(k.mean()),
                      float(tot.mean()), float(np.percentile(tot, 95)), float(k.mean() / tot.mean()))


def bench_latency(params: RetrieverParams, bank: TermBank, encoder: ToyEncoder,
                  speech: Sequence[SpeechFeatures], bank_sizes: Sequence[int], queries: int = 200,
                  k: int = 50, warmup: int = 5, batch: int = 512, seed: int = 0,
                  include_cosine: bool = True) -> list[LatencyRow]:
    """Per-stage latency of presence retrieval (and the cosine baseline) per bank size.

    Each size takes the first ``size`` terms of ``bank``; queries cycle through
    ``speech``. The first ``warmup`` queries per size are discarded.
    """
    from .baseline import DenseIndex, cosine_retrieve

    if queries < 30:
        raise ValueError("need at least 30 timed queries")
    if max(bank_sizes) > len(bank):
        raise ValueError(f"bank has {len(bank)} terms, largest requested size is {max(bank_sizes)}")
    rng = substream(seed, "bench")
    order = rng.permutation(len(speech))
    rows = []
    feats_all = encoder.bank_features(bank)
    for size in bank_sizes:
        sub = bank.subset(bank.ids[:size])
        prepared = PreparedBank(sub, encoder, batch, feats_all[:size])
        times = []
        for q in range(warmup + queries):
            res = retrieve(params, speech[order[q % len(order)]], prepared, k)
            if q >= warmup:
                times.append(res.timing)
        rows.append(_summarise(size, "presence", times))
        if include_cosine:
            index = DenseIndex.build(sub, encoder, feats_all[:size])
            times = []
            for q in range(warmup + queries):
                res = cosine_retrieve(index, speech[order[q % len(order)]], k)
                if q >= warmup:
                    times.append(res.timing)
            rows.append(_summarise(size, "cosine", times))
    return rows


def write_latency_csv(rows: Sequence[LatencyRow], fh) -> None:
    fields = list(LatencyRow.__dataclass_fields__)
    w = csv.DictWriter(fh, fieldnames=fields)
    w.writeheader()
    for r in rows:
        w.writerow({f: (round(v, 4) if isinstance(v, float) else v) for f, v in asdict(r).items()})
