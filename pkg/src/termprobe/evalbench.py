"""Recall@k evaluation, bank-size sweeps and ablation tables."""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baseline import DenseIndex, cosine_retrieve, embed_for_index
from .corpus import Benchmark, CapacityError, Corpus, Stage, TermBank, ToyEncoder, substream
from .retriever import RetrieverParams
from .serving import PreparedBank, RetrievalResult, bank_scores, retrieve, top_k_select
from .training import TrainingConfig, TrainingDiverged, run_curriculum

log = logging.getLogger(__name__)

KS = (10, 20, 30, 40, 50)


class ProtocolError(ValueError):
    pass


def recall_at_k(results: Sequence[RetrievalResult | Sequence[int]], gold: Sequence[Iterable[int]], k: int,
                bank_ids: Iterable[int] | None = None, average: str = "micro") -> float:
    """Percentage of gold terms found in the top ``k`` of each utterance's ranking.

    ``micro`` pools hits and gold counts over utterances; ``macro`` averages
    the per-utterance recall over utterances with at least one gold term.
    Gold terms are unique per utterance.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(results) != len(gold):
        raise ValueError("results and gold differ in length")
    known = None if bank_ids is None else set(bank_ids)
    hits = total = 0
    per_utt = []
    for res, g in zip(results, gold):
        g = set(g)
        if known is not None:
            missing = g - known
            if missing:
                raise ProtocolError(f"gold term(s) {sorted(missing)} are not in the bank")
        ranked = res.term_ids if isinstance(res, RetrievalResult) else list(res)
        h = len(g & set(ranked[:k]))
        hits += h
        total += len(g)
        if g:
            per_utt.append(h / len(g))
    if average == "micro":
        return 100.0 * hits / total if total else 0.0
    if average == "macro":
        return 100.0 * float(np.mean(per_utt)) if per_utt else 0.0
    raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")


@dataclass
class RecallReport:
    label: str
    recall: dict[int, float]
    n_gold: int
    hits: dict[int, int] = field(default_factory=dict)

    def row(self) -> dict:
        return {"label": self.label, **{f"top{k}": round(v, 2) for k, v in self.recall.items()},
                "n_gold": self.n_gold}


def rankings(params: RetrieverParams | None, test: Corpus, bank: TermBank, encoder: ToyEncoder,
             k: int, scorer: str = "presence", pooling: bool = True, batch: int = 512) -> list[list[int]]:
    """Top-``k`` term ids for every test utterance under one scorer."""
    if scorer == "presence":
        prepared = PreparedBank(bank, encoder, batch)
        return [retrieve(params, test.speech(u), prepared, k, pooling=pooling).term_ids
                for u in test.utterances]
    if scorer == "cosine":
        index = DenseIndex.build(bank, encoder)
        return [cosine_retrieve(index, test.speech(u), k).term_ids for u in test.utterances]
    raise ValueError(f"unknown scorer {scorer!r}")


def evaluate(params: RetrieverParams | None, test: Corpus, bank: TermBank | None = None,
             ks: Sequence[int] = KS, scorer: str = "presence", label: str | None = None,
             pooling: bool = True, average: str = "micro") -> RecallReport:
    """Recall at every ``k`` in ``ks`` from one ranking per utterance."""
    bank = bank or test.bank
    ranked = rankings(params, test, bank, test.encoder, max(ks), scorer, pooling)
    gold = [u.positive_ids for u in test.utterances]
    n_gold = sum(len(g) for g in gold)
    rec = {k: recall_at_k(ranked, gold, k, bank.ids, average) for k in ks}
    hits = {k: sum(len(set(r[:k]) & g) for r, g in zip(ranked, gold)) for k in ks}
    return RecallReport(label or scorer, rec, n_gold, hits)


def write_reports(reports: Sequence[RecallReport], directory, stem: str) -> tuple[Path, Path]:
    """CSV plus a markdown table shaped like a Top-k recall table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ks = sorted(reports[0].recall)
    csv_path = directory / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["label", *[f"top{k}" for k in ks], "n_gold"])
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    md_path = directory / f"{stem}.md"
    lines = ["| | " + " | ".join(f"Top-{k}" for k in ks) + " |",
             "|---|" + "---|" * len(ks)]
    for r in reports:
        lines.append(f"| {r.label} | " + " | ".join(f"{r.recall[k]:.2f}" for k in ks) + " |")
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


# --------------------------------------------------------------------------
# bank-size sweep


@dataclass
class SweepPoint:
    scorer: str
    bank_size: int
    recall: float
    per_seed: list[float]


def score_matrix(params: RetrieverParams | None, test: Corpus, bank: TermBank, scorer: str = "presence",
                 pooling: bool = True, batch: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Scores of every bank term for every test utterance, columns in ascending term id.

    A term's score does not depend on the rest of the bank, so rankings over
    any sub-bank can be read off these columns.
    """
    if scorer == "presence":
        prepared = PreparedBank(bank, test.encoder, batch)
        rows = [bank_scores(params, test.speech(u), prepared, pooling=pooling) for u in test.utterances]
        return np.stack(rows), prepared.ids
    if scorer == "cosine":
        index = DenseIndex.build(bank, test.encoder)
        rows = [index.vectors @ embed_for_index(test.speech(u).frames, test.speech(u).frame_mask)
                for u in test.utterances]
        return np.stack(rows), index.ids
    raise ValueError(f"unknown scorer {scorer!r}")


def sweep_bank_size(params: RetrieverParams, test: Corpus, distractors: TermBank, sizes: Sequence[int],
                    k: int = 50, seeds: Sequence[int] = (0, 1, 2),
                    scorers: Sequence[str] = ("presence", "cosine")) -> list[SweepPoint]:
    """Recall@k as sampled distractors are added to the gold bank.

    For each seed the distractor pool is shuffled once and each size takes
    a prefix of that order, so the banks of one seed are nested and recall
    can only fall as the bank grows. Ranking within a sub-bank uses the same
    selection and id tie-break as :func:`retrieve`.
    """
    base = test.bank
    gold = [u.positive_ids for u in test.utterances]
    if set().union(*gold) & set(distractors.ids):
        raise ValueError("distractor pool overlaps the gold terms")
    for size in sizes:
        if size < len(base):
            raise ValueError(f"size {size} is smaller than the base bank ({len(base)})")
        if size - len(base) > len(distractors):
            raise CapacityError(f"need {size - len(base)} distractors, pool has {len(distractors)}")
    orders = {seed: substream(seed, "sweep").permutation(len(distractors)) for seed in seeds}
    needed = sorted({int(i) for seed in seeds for i in orders[seed][:max(sizes) - len(base)]})
    full = base.merged(TermBank(distractors.entries[i] for i in needed))
    out = []
    for scorer in scorers:
        scores, ids = score_matrix(params, test, full, scorer)
        col = {int(t): j for j, t in enumerate(ids)}
        base_cols = [col[t] for t in base.ids]
        for size in sizes:
            extra = size - len(base)
            vals = []
            for seed in (seeds if extra else seeds[:1]):
                picked = [col[distractors.entries[int(i)].term_id] for i in orders[seed][:extra]]
                cols = np.sort(np.array(base_cols + picked))  # ascending term id
                ranked = [ids[cols[top_k_select(row[cols], k)]].tolist() for row in scores]
                vals.append(recall_at_k(ranked, gold, k))
            out.append(SweepPoint(scorer, size, float(np.mean(vals)), vals))
    order = {s: i for i, s in enumerate(sizes)}
    return sorted(out, key=lambda p: (order[p.bank_size], scorers.index(p.scorer)))


def write_sweep(points: Sequence[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scorer", "bank_size", "recall", "per_seed"])
        for p in points:
            w.writerow([p.scorer, p.bank_size, round(p.recall, 2), ";".join(f"{v:.2f}" for v in p.per_seed)])


# --------------------------------------------------------------------------
# ablations


class AblationArm(str, enum.Enum):
    FULL = "full"
    NO_POOLING = "nopool"
    REAL_TERM_ONLY = "realonly"
    PHRASE_ONLY = "phrase"
    WORD_ONLY = "word"


ARM_LABELS = {
    AblationArm.FULL: "full curriculum",
    AblationArm.NO_POOLING: "- token-level pooling",
    AblationArm.REAL_TERM_ONLY: "real-term stage only",
    AblationArm.PHRASE_ONLY: "phrase stage only",
    AblationArm.WORD_ONLY: "word stage only",
}


def arm_setup(arm: AblationArm | str, cfg: TrainingConfig) -> tuple[TrainingConfig, bool]:
    """Training config and pooling flag for an arm; the step budget is shared."""
    arm = AblationArm(arm)
    schedules = {
        AblationArm.FULL: cfg.stage_schedule,
        AblationArm.NO_POOLING: cfg.stage_schedule,
        AblationArm.REAL_TERM_ONLY: ((Stage.WORD, 0.0), (Stage.PHRASE, 0.0), (Stage.REAL_TERM, 1.0)),
        AblationArm.PHRASE_ONLY: ((Stage.WORD, 0.0), (Stage.PHRASE, 1.0), (Stage.REAL_TERM, 0.0)),
        AblationArm.WORD_ONLY: ((Stage.WORD, 1.0), (Stage.PHRASE, 0.0), (Stage.REAL_TERM, 0.0)),
    }
    return replace(cfg, stage_schedule=schedules[arm], patience=None), arm is not AblationArm.NO_POOLING


@dataclass
class AblationResult:
    arm: AblationArm
    report: RecallReport | None
    error: str | None = None
    params: RetrieverParams | None = None


def run_ablations(bench: Benchmark, cfg: TrainingConfig, arms: Sequence[AblationArm | str],
                  heads: int = 8, dropout_p: float = 0.1, ks: Sequence[int] = KS,
                  keep_params: bool = False) -> list[AblationResult]:
    """Train and evaluate each arm with the same seed and step budget.

    ``cfg.total_steps`` must be set so every arm gets the same number of
    optimiser steps. A diverging arm is recorded as failed.
    """
    if cfg.total_steps is None:
        cfg = replace(cfg, total_steps=cfg.max_epochs * -(-len(bench.train) // cfg.batch_size))
    out = []
    for arm in arms:
        arm = AblationArm(arm)
        arm_cfg, pooling = arm_setup(arm, cfg)
        try:
            res = run_curriculum(bench.train, arm_cfg, heads=heads, dropout_p=dropout_p, pooling=pooling)
        except TrainingDiverged as exc:
            log.warning("arm %s diverged at step %d: %s", arm.value, exc.step, exc)
            out.append(AblationResult(arm, None, f"diverged at step {exc.step}"))
            continue
        rep = evaluate(res.params, bench.test, ks=ks, label=ARM_LABELS[arm], pooling=pooling)
        out.append(AblationResult(arm, rep, params=res.params if keep_params else None))
    return out


def write_ablation_table(results: Sequence[AblationResult], directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ks = next((sorted(r.report.recall) for r in results if r.report), list(KS))
    csv_path = directory / "ablation.csv"
    md_path = directory / "ablation.md"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", *[f"top{k}" for k in ks], "status"])
        for r in results:
            vals = [f"{r.report.recall[k]:.2f}" for k in ks] if r.report else [""] * len(ks)
            w.writerow([r.arm.value, *vals, r.error or "ok"])
    lines = ["| | " + " | ".join(f"Top-{k}" for k in ks) + " |", "|---|" + "---|" * len(ks)]
    for r in results:
        vals = [f"{r.report.recall[k]:.2f}" for k in ks] if r.report else ["failed"] * len(ks)
        lines.append(f"| {ARM_LABELS[r.arm]} | " + " | ".join(vals) + " |")
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path
