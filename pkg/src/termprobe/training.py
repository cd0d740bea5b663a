"""Dual-objective BCE training with AdamW, warmup/cosine schedule and a
word -> phrase -> real-term curriculum."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, SkipUtterance, Stage, StageTerm, TermBank, Utterance, contains, \
    sample_stage_terms, substream
from .numerics import DTYPE, sigmoid
from .retriever import BatchScorer, RetrieverParams, pad_stack, save_checkpoint

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
CurriculumStage = Stage


class BatchCompositionError(ValueError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: RetrieverParams | None, step: int):
        super().__init__(msg)
        self.last_good = last_good
        self.step = step


@dataclass
class TrainingConfig:
    batch_size: int = 32
    max_bank_per_batch: int = 100
    peak_lr: float = 1e-4
    init_lr: float = 1e-7
    warmup_steps: int = 500
    max_epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    # fractions of the step budget, in curriculum order
    stage_schedule: tuple[tuple[Stage, float], ...] = (
        (Stage.WORD, 0.3), (Stage.PHRASE, 0.3), (Stage.REAL_TERM, 0.4))
    total_steps: int | None = None
    grad_clip: float | None = 1.0
    patience: int | None = 5
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "TrainingConfig":
        """Short-budget preset for the d=64 synthetic benchmark (a few CPU minutes)."""
        base = dict(total_steps=1500, peak_lr=3e-3, warmup_steps=100, patience=None)
        return cls(**(base | overrides))

    def __post_init__(self):
        if self.init_lr > self.peak_lr:
            raise ValueError("init_lr must not exceed peak_lr")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        self.stage_schedule = tuple((Stage(s), float(f)) for s, f in self.stage_schedule)
        orders = [s.order for s, _ in self.stage_schedule]
        if orders != sorted(orders) or len(set(orders)) != len(orders):
            raise ValueError("stage_schedule must list word, phrase, real_term in that order")
        if any(f < 0 for _, f in self.stage_schedule) or sum(f for _, f in self.stage_schedule) <= 0:
            raise ValueError("stage budgets must be non-negative with a positive total")


# --------------------------------------------------------------------------
# loss, schedule, optimiser


def dual_bce_loss(probs, labels) -> tuple[float, np.ndarray]:
    """Mean -log p over positives plus mean -log(1-p) over negatives.

    Returns the loss and its gradient with respect to the logits,
    ``(p - y) / n_group`` for each element.
    """
    p = np.asarray(probs, np.float64)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"probs {p.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise BatchCompositionError(f"batch needs positives and negatives, got {n_pos} / {n_neg}")
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -np.log(pc[y]).sum() / n_pos - np.log1p(-pc[~y]).sum() / n_neg
    grad = np.where(y, (p - 1.0) / n_pos, p / n_neg)
    return float(loss), grad


def lr_at(step: int, cfg: TrainingConfig, total_steps: int) -> float:
    """Linear warmup from ``init_lr`` (step 1) to ``peak_lr`` (step ``warmup_steps``),
    then cosine annealing to zero at ``total_steps``."""
    W = cfg.warmup_steps
    if step <= W:
        if W == 1:
            return cfg.peak_lr
        return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * (step - 1) / (W - 1)
    span = max(total_steps - W, 1)
    progress = min((step - W) / span, 1.0)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: RetrieverParams) -> "AdamState":
        return cls(params.zero_like(), params.zero_like())


def adamw_step(params: RetrieverParams, grads: dict[str, np.ndarray], state: AdamState,
               step_t: int, lr_t: float, beta1: float = 0.9, beta2: float = 0.98,
               weight_decay: float = 0.01, eps: float = 1e-8) -> None:
    """In-place AdamW update: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""
    if step_t < 1:
        raise ValueError("step_t starts at 1")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    c1 = 1.0 - beta1 ** step_t
    c2 = 1.0 - beta2 ** step_t
    for name, p in params.tensors().items():
        g = grads[name].astype(np.float64)
        m = state.m[name]
        v = state.v[name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p
        p -= (lr_t * update).astype(p.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# --------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class TrainingPair:
    utterance_id: str
    term: tuple[int, ...]
    label: int


@dataclass
class Batch:
    utterances: list[Utterance]
    candidates: list[tuple[int, ...]]
    labels: np.ndarray  # (U, C) in {0, 1}
    stage: Stage

    @property
    def pairs(self) -> list[TrainingPair]:
        return [TrainingPair(u.id, c, int(self.labels[i, j]))
                for i, u in enumerate(self.utterances) for j, c in enumerate(self.candidates)]


def stage_pool(corpus: Corpus, stage: Stage) -> list[Utterance]:
    if Stage(stage) is Stage.REAL_TERM:
        return corpus.with_terms()
    return [u for u in corpus.utterances if len(u.token_ids) >= 4]


def build_batch(corpus: Corpus, utterances: Sequence[Utterance], stage: Stage, cfg: TrainingConfig,
                rng: np.random.Generator, bank: TermBank | None = None) -> Batch:
    """Candidate set = stage positives of the batch + sampled negatives, capped.

    Positives are kept first; when they alone exceed the cap a uniform subset
    is kept. Negatives come from the term bank (real-term stage) or from
    stage-sampled spans of other utterances (word/phrase stages). Every
    utterance x candidate pair is labelled by contiguous occurrence.
    """
    stage = Stage(stage)
    bank = bank or corpus.bank
    positives: dict[tuple[int, ...], None] = {}
    kept_utts = []
    for u in utterances:
        try:
            terms = sample_stage_terms(u, stage, rng)
        except SkipUtterance:
            continue
        kept_utts.append(u)
        for t in terms:
            positives.setdefault(t.tokens)
    if not kept_utts:
        raise BatchCompositionError(f"no utterance in the batch is usable for stage {stage.value}")
    cap = cfg.max_bank_per_batch
    cands = list(positives)
    if len(cands) > cap:
        log.info("%d positives exceed the per-batch bank cap of %d; subsampling", len(cands), cap)
        keep = np.sort(rng.choice(len(cands), cap, replace=False))
        cands = [cands[i] for i in keep]
    seen = set(cands)
    pool = stage_pool(corpus, Stage.WORD) if stage is not Stage.REAL_TERM else None
    tries = 0
    while len(cands) < cap and tries < 20 * cap:
        tries += 1
        if stage is Stage.REAL_TERM:
            t = bank.entries[int(rng.integers(len(bank)))].token_ids
        else:
            other = pool[int(rng.integers(len(pool)))]
            t = sample_stage_terms(other, stage, rng, n_terms=(1, 1))[0].tokens
        if t in seen or any(contains(u.token_ids, t) >= 0 for u in kept_utts):
            continue
        seen.add(t)
        cands.append(t)
    labels = np.array([[contains(u.token_ids, c) >= 0 for c in cands] for u in kept_utts], dtype=np.int8)
    return Batch(kept_utts, cands, labels, stage)


# --------------------------------------------------------------------------
# training loop


@dataclass
class MetricsLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "steps.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "stage", "lr", "loss"])
            w.writeheader()
            w.writerows(self.steps)
        with open(directory / "epochs.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "stage", "recall@10"])
            w.writeheader()
            w.writerows(self.epochs)


@dataclass
class TrainResult:
    params: RetrieverParams
    log: MetricsLog
    stage_steps: dict[Stage, int]
    stopped_early: bool = False


def stage_budgets(cfg: TrainingConfig, total_steps: int) -> list[tuple[Stage, int]]:
    """Split ``total_steps`` across stages proportionally (largest remainder)."""
    fracs = np.array([f for _, f in cfg.stage_schedule], dtype=np.float64)
    raw = fracs / fracs.sum() * total_steps
    steps = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - steps), kind="stable")[: total_steps - steps.sum()]:
        steps[i] += 1
    return [(s, int(n)) for (s, _), n in zip(cfg.stage_schedule, steps)]


class Trainer:
    """Single-writer training loop over one parameter set."""

    def __init__(self, corpus: Corpus, cfg: TrainingConfig, params: RetrieverParams | None = None,
                 d: int | None = None, heads: int = 8, dropout_p: float = 0.1,
                 pooling: bool = True, eps: float = 1e-6):
        self.corpus = corpus
        self.cfg = cfg
        d = d or corpus.encoder.cfg.embed_dim
        self.params = params or RetrieverParams.init(d, heads, substream(cfg.seed, "init"), dropout_p)
        self.state = AdamState.zeros(self.params)
        self.scorer = BatchScorer(self.params, eps=eps, pooling=pooling)
        self.step = 0
        self.log = MetricsLog()
        self._batch_rng = substream(cfg.seed, "batches")
        self._drop_rng = substream(cfg.seed, "dropout")
        self._tokens = corpus.encoder.token_table

    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.corpus) / self.cfg.batch_size))

    def total_steps(self) -> int:
        return self.cfg.total_steps or self.cfg.max_epochs * self.steps_per_epoch()

    def batch_tensors(self, batch: Batch):
        S, Sm = pad_stack([self.corpus.features[u.id].frames for u in batch.utterances],
                          [self.corpus.features[u.id].frame_mask for u in batch.utterances])
        T, Tm = pad_stack([self._tokens[list(c)] for c in batch.candidates])
        return S, Sm, T, Tm

    def batch_loss(self, batch: Batch, mode: str = "infer") -> float:
        S, Sm, T, Tm = self.batch_tensors(batch)
        logits = self.scorer.forward(S, Sm, T, Tm, mode=mode, rng=self._drop_rng)
        return dual_bce_loss(sigmoid(logits), batch.labels)[0]

    def train_step(self, batch: Batch, lr: float) -> float:
        S, Sm, T, Tm = self.batch_tensors(batch)
        logits = self.scorer.forward(S, Sm, T, Tm, mode="train", rng=self._drop_rng, keep=True)
        loss, dlogits = dual_bce_loss(sigmoid(logits), batch.labels)
        if not math.isfinite(loss):
            raise NonFiniteGradient(f"non-finite loss at step {self.step + 1}")
        grads = self.scorer.backward(dlogits)
        self.scorer.cache = None
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient in {name} at step {self.step + 1}")
        if self.cfg.grad_clip:
            norm = clip_global_norm(grads, self.cfg.grad_clip)
            if norm > self.cfg.grad_clip and norm > 10 * self.cfg.grad_clip:
                self.log.events.append(f"step {self.step + 1}: clipped gradient norm {norm:.3g}")
        adamw_step(self.params, grads, self.state, self.step + 1, lr, self.cfg.adam_beta1,
                   self.cfg.adam_beta2, self.cfg.weight_decay, self.cfg.adam_eps)
        self.step += 1
        return loss

    def run(self, validate: Callable[[RetrieverParams], float] | None = None,
            checkpoint_dir=None, on_step: Callable[[int, Stage, float], None] | None = None) -> TrainResult:
        cfg = self.cfg
        total = self.total_steps()
        spe = self.steps_per_epoch()
        budgets = stage_budgets(cfg, total)
        best, stale, stopped = -1.0, 0, False
        epoch = 0
        for stage, n_steps in budgets:
            pool = stage_pool(self.corpus, stage)
            if n_steps and not pool:
                raise BatchCompositionError(f"corpus has no data for stage {stage.value}")
            order: list[int] = []
            for _ in range(n_steps):
                if len(order) < cfg.batch_size:
                    order.extend(self._batch_rng.permutation(len(pool)).tolist())
                idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
                batch = build_batch(self.corpus, [pool[i] for i in idx], stage, cfg, self._batch_rng)
                lr = lr_at(self.step + 1, cfg, total)
                try:
                    loss = self.train_step(batch, lr)
                except NonFiniteGradient as exc:
                    # parameters are untouched by the failed step
                    raise TrainingDiverged(str(exc), self.params.copy(), self.step) from exc
                self.log.steps.append({"step": self.step, "stage": stage.value, "lr": lr, "loss": loss})
                if on_step:
                    on_step(self.step, stage, loss)
                if validate and self.step % spe == 0:
                    epoch += 1
                    r = float(validate(self.params))
                    self.log.epochs.append({"epoch": epoch, "stage": stage.value, "recall@10": r})
                    if r > best:
                        best, stale = r, 0
                    else:
                        stale += 1
                    if cfg.patience and stale >= cfg.patience and stage is budgets[-1][0]:
                        stopped = True
                        break
            if checkpoint_dir and n_steps:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(checkpoint_dir) / f"stage-{stage.value}.ckpt", self.params,
                                {"step": self.step, "stage": stage.value})
            if stopped:
                break
        return TrainResult(self.params, self.log, dict(budgets), stopped)


def run_curriculum(corpus: Corpus, cfg: TrainingConfig, *, heads: int = 8, dropout_p: float = 0.1,
                   pooling: bool = True, eps: float = 1e-6, params: RetrieverParams | None = None,
                   validate=None, checkpoint_dir=None) -> TrainResult:
    """Train word -> phrase -> real-term on one parameter set (stage budgets from ``cfg``)."""
    trainer = Trainer(corpus, cfg, params=params, heads=heads, dropout_p=dropout_p, pooling=pooling, eps=eps)
    return trainer.run(validate=validate, checkpoint_dir=checkpoint_dir)
