"""Synthetic speech/term corpus, curriculum samplers and on-disk formats.

The toy encoder stands in for a frozen audio encoder plus a frozen text
embedding table living in one shared space: an utterance is a token sequence,
its "speech" is each token's embedding repeated for a few frames with Gaussian
noise, interleaved with filler (non-lexical) frames. Terms are token
sequences looked up in the same table.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import DTYPE

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"A2PF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHBII")


class CapacityError(ValueError):
    pass


class FeatureFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class BankError(ValueError):
    pass


class SkipUtterance(Exception):
    """Raised by the real-term sampler for utterances without annotated terms."""


class Stage(str, enum.Enum):
    WORD = "word"
    PHRASE = "phrase"
    REAL_TERM = "real_term"

    @property
    def order(self) -> int:
        return list(Stage).index(self)


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for one named consumer of a global seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


# --------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class SpeechFeatures:
    utterance_id: str
    frames: np.ndarray
    frame_mask: np.ndarray = None

    def __post_init__(self):
        frames = np.ascontiguousarray(self.frames, dtype=DTYPE)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise ValueError(f"speech frames must be a non-empty matrix, got {frames.shape}")
        mask = self.frame_mask
        mask = np.ones(frames.shape[0], bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != (frames.shape[0],):
            raise ValueError("frame mask length must equal the number of frames")
        _check_prefix_mask(mask, "speech")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "frame_mask", mask)

    @property
    def n_valid(self) -> int:
        return int(self.frame_mask.sum())


@dataclass(frozen=True)
class TermFeatures:
    term_id: int
    tokens: np.ndarray
    token_mask: np.ndarray = None
    surface: str = ""

    def __post_init__(self):
        tokens = np.ascontiguousarray(self.tokens, dtype=DTYPE)
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise ValueError(f"term tokens must be a non-empty matrix, got {tokens.shape}")
        mask = self.token_mask
        mask = np.ones(tokens.shape[0], bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != (tokens.shape[0],):
            raise ValueError("token mask length must equal the number of token rows")
        _check_prefix_mask(mask, "term")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "token_mask", mask)

    @property
    def n_valid(self) -> int:
        return int(self.token_mask.sum())


def _check_prefix_mask(mask: np.ndarray, what: str) -> None:
    n = int(mask.sum())
    if n == 0:
        raise ValueError(f"{what} mask has no valid positions")
    if not mask[:n].all():
        raise ValueError(f"{what} mask must be a contiguous valid prefix")


@dataclass(frozen=True)
class TermSpan:
    term_id: int
    start: int
    end: int


@dataclass
class Utterance:
    id: str
    token_ids: list[int]
    terms: list[TermSpan] = field(default_factory=list)
    features: str = ""

    @property
    def positive_ids(self) -> set[int]:
        return {t.term_id for t in self.terms}


@dataclass(frozen=True)
class TermEntry:
    term_id: int
    src: str
    tgt: str
    token_ids: tuple[int, ...]


class TermBank:
    """Ordered, id-indexed term collection. Uniqueness is by token sequence."""

    def __init__(self, entries: Iterable[TermEntry]):
        self.entries: list[TermEntry] = []
        self._by_id: dict[int, int] = {}
        self._by_tokens: dict[tuple[int, ...], int] = {}
        seen_src: dict[str, int] = {}
        for e in entries:
            e = TermEntry(int(e.term_id), e.src, e.tgt, tuple(int(t) for t in e.token_ids))
            if not e.token_ids:
                raise BankError(f"term {e.term_id} has an empty token sequence")
            if e.term_id in self._by_id:
                raise BankError(f"duplicate term_id {e.term_id}")
            if e.token_ids in self._by_tokens:
                other = self.entries[self._by_tokens[e.token_ids]].term_id
                raise BankError(f"term {e.term_id} repeats the token sequence of term {other}")
            if e.src in seen_src:
                raise BankError(f"term {e.term_id} repeats the surface {e.src!r} of term {seen_src[e.src]}")
            seen_src[e.src] = e.term_id
            self._by_id[e.term_id] = len(self.entries)
            self._by_tokens[e.token_ids] = len(self.entries)
            self.entries.append(e)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, term_id: int) -> TermEntry:
        return self.entries[self._by_id[term_id]]

    def __contains__(self, term_id) -> bool:
        return term_id in self._by_id

    @property
    def ids(self) -> list[int]:
        return [e.term_id for e in self.entries]

    def find(self, token_ids: Sequence[int]) -> TermEntry | None:
        i = self._by_tokens.get(tuple(token_ids))
        return None if i is None else self.entries[i]

    def subset(self, term_ids: Iterable[int]) -> "TermBank":
        return TermBank(self[i] for i in term_ids)

    def merged(self, other: "TermBank") -> "TermBank":
        return TermBank([*self.entries, *other.entries])

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                row = {"term_id": e.term_id, "src": e.src, "tgt": e.tgt, "token_ids": list(e.token_ids)}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TermBank":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    entries.append(TermEntry(row["term_id"], row["src"], row["tgt"], tuple(row["token_ids"])))
                except (KeyError, json.JSONDecodeError) as exc:
                    raise BankError(f"{path}:{lineno}: malformed term row ({exc})") from exc
        return cls(entries)


# --------------------------------------------------------------------------
# toy encoder


@dataclass
class ToyEncoderConfig:
    vocab_size: int = 500
    embed_dim: int = 64
    frames_per_token: tuple[int, int] = (1, 3)
    noise_sigma: float = 0.1
    filler_rate: float = 0.3
    seed: int = 0
    utterance_tokens: tuple[int, int] = (12, 30)
    # P(term length = 1, 2, ...)
    term_lengths: tuple[float, ...] = (0.1, 0.3, 0.25, 0.15, 0.12, 0.08)
    n_filler_kinds: int = 4

    def __post_init__(self):
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi <= 3:
            raise ValueError(f"frames_per_token must lie within [1, 3], got {self.frames_per_token}")
        if self.noise_sigma < 0 or not 0 <= self.filler_rate < 1:
            raise ValueError("noise_sigma must be >= 0 and filler_rate in [0, 1)")
        if abs(sum(self.term_lengths) - 1.0) > 1e-9:
            raise ValueError("term_lengths must sum to 1")


_ONSETS = "b d f g k l m n p r s t v z".split() + ["ch", "sh", "tr", "pl"]
_VOWELS = "a e i o u".split() + ["ai", "ou"]


def token_surface(token_id: int) -> str:
    """Injective pseudo-syllable spelling of a token id."""
    parts = []
    n = int(token_id)
    while True:
        n, r = divmod(n, len(_ONSETS) * len(_VOWELS))
        parts.append(_ONSETS[r // len(_VOWELS)] + _VOWELS[r % len(_VOWELS)])
        if n == 0:
            break
        n -= 1
    return "".join(reversed(parts))


def term_surfaces(token_ids: Sequence[int]) -> tuple[str, str]:
    words = [token_surface(t) for t in token_ids]
    src = "-".join(words).capitalize()
    tgt = "·".join(w[::-1].upper() for w in words)
    return src, tgt


class ToyEncoder:
    """Frozen embedding table (text side) and frame renderer (speech side)."""

    def __init__(self, cfg: ToyEncoderConfig, embeddings: np.ndarray | None = None):
        self.cfg = cfg
        if embeddings is None:
            rng = substream(cfg.seed, "embeddings")
            embeddings = rng.standard_normal((cfg.vocab_size + cfg.n_filler_kinds, cfg.embed_dim))
        embeddings = np.ascontiguousarray(embeddings, dtype=DTYPE)
        if embeddings.shape != (cfg.vocab_size + cfg.n_filler_kinds, cfg.embed_dim):
            raise ValueError(f"embedding table has shape {embeddings.shape}, config wants "
                             f"{(cfg.vocab_size + cfg.n_filler_kinds, cfg.embed_dim)}")
        self.table = embeddings
        self.table.setflags(write=False)

    @property
    def token_table(self) -> np.ndarray:
        return self.table[: self.cfg.vocab_size]

    @property
    def filler_table(self) -> np.ndarray:
        return self.table[self.cfg.vocab_size:]

    def embed_tokens(self, token_ids: Sequence[int]) -> np.ndarray:
        return self.token_table[np.asarray(token_ids, dtype=np.int64)].copy()

    def term_features(self, entry: TermEntry) -> TermFeatures:
        return TermFeatures(entry.term_id, self.embed_tokens(entry.token_ids), surface=entry.src)

    def bank_features(self, bank: TermBank) -> list[TermFeatures]:
        return [self.term_features(e) for e in bank]

    def render(self, token_ids: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        """Frames for a transcript: per-token repeats, filler frames, additive noise."""
        cfg = self.cfg
        lo, hi = cfg.frames_per_token
        rows = []
        fill = cfg.filler_rate > 0
        for tok in token_ids:
            if fill and rng.random() < cfg.filler_rate:
                rows.append(cfg.vocab_size + int(rng.integers(cfg.n_filler_kinds)))
            rows.extend([int(tok)] * int(rng.integers(lo, hi + 1)))
        if fill and rng.random() < cfg.filler_rate:
            rows.append(cfg.vocab_size + int(rng.integers(cfg.n_filler_kinds)))
        frames = self.table[np.asarray(rows, dtype=np.int64)].astype(DTYPE)
        if cfg.noise_sigma > 0:
            frames = frames + (cfg.noise_sigma * rng.standard_normal(frames.shape)).astype(DTYPE)
        return frames


# --------------------------------------------------------------------------
# generation


@dataclass
class Corpus:
    utterances: list[Utterance]
    features: dict[str, SpeechFeatures]
    bank: TermBank
    encoder: ToyEncoder

    def __len__(self) -> int:
        return len(self.utterances)

    def speech(self, utt: Utterance | str) -> SpeechFeatures:
        return self.features[utt if isinstance(utt, str) else utt.id]

    def with_terms(self) -> list[Utterance]:
        return [u for u in self.utterances if u.terms]

    def digest(self) -> str:
        """SHA-256 over manifest rows and feature bytes, in corpus order."""
        h = hashlib.sha256()
        for u in self.utterances:
            h.update(json.dumps(_manifest_row(u), sort_keys=True).encode())
            h.update(self.features[u.id].frames.tobytes())
        for e in self.bank:
            h.update(json.dumps([e.term_id, e.src, e.tgt, list(e.token_ids)]).encode())
        h.update(self.encoder.table.tobytes())
        return h.hexdigest()


def contains(haystack: Sequence[int], needle: Sequence[int]) -> int:
    """Start index of the first contiguous occurrence of ``needle``, or -1."""
    n = len(needle)
    needle = list(needle)
    hay = list(haystack)
    for i in range(len(hay) - n + 1):
        if hay[i:i + n] == needle:
            return i
    return -1


def max_constructible_terms(cfg: ToyEncoderConfig, reserved_free: int | None = None) -> int:
    v = cfg.vocab_size if reserved_free is None else reserved_free
    return sum(v ** (i + 1) for i, p in enumerate(cfg.term_lengths) if p > 0)


def random_terms(cfg: ToyEncoderConfig, n: int, rng: np.random.Generator,
                 exclude: Iterable[tuple[int, ...]] = ()) -> list[tuple[int, ...]]:
    """``n`` distinct token sequences with lengths drawn from ``cfg.term_lengths``."""
    if n > max_constructible_terms(cfg):
        raise CapacityError(f"cannot build {n} distinct terms from a vocabulary of {cfg.vocab_size}")
    lengths = np.arange(1, len(cfg.term_lengths) + 1)
    taken = set(exclude)
    out: list[tuple[int, ...]] = []
    n_single = sum(1 for t in taken if len(t) == 1)
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 10_000:
            raise CapacityError(f"gave up after {attempts} draws building {n} distinct terms")
        L = int(rng.choice(lengths, p=cfg.term_lengths))
        if L == 1 and n_single >= cfg.vocab_size // 4:
            continue
        t = tuple(int(x) for x in rng.integers(0, cfg.vocab_size, L))
        if t in taken:
            continue
        taken.add(t)
        n_single += L == 1
        out.append(t)
    return out


def make_bank(token_seqs: Sequence[tuple[int, ...]], first_id: int = 0) -> TermBank:
    entries = []
    for i, toks in enumerate(token_seqs):
        src, tgt = term_surfaces(toks)
        entries.append(TermEntry(first_id + i, src, tgt, tuple(toks)))
    return TermBank(entries)


def annotate(token_ids: Sequence[int], bank: TermBank, index: dict | None = None) -> list[TermSpan]:
    """Every bank term occurring contiguously in ``token_ids`` (first occurrence)."""
    if index is None:
        index = bank_index(bank)
    toks = list(token_ids)
    found: dict[int, TermSpan] = {}
    for i, t in enumerate(toks):
        for e in index.get(t, ()):
            n = len(e.token_ids)
            if e.term_id not in found and tuple(toks[i:i + n]) == e.token_ids:
                found[e.term_id] = TermSpan(e.term_id, i, i + n)
    return sorted(found.values(), key=lambda s: (s.start, s.term_id))


def bank_index(bank: TermBank) -> dict[int, list[TermEntry]]:
    index: dict[int, list[TermEntry]] = {}
    for e in bank:
        index.setdefault(e.token_ids[0], []).append(e)
    return index


def generate_corpus(cfg: ToyEncoderConfig, n_utterances: int, bank_size: int,
                    stage_mix: dict | None = None, *, bank: TermBank | None = None,
                    reserved_tokens: Iterable[int] = (), encoder: ToyEncoder | None = None,
                    label: str = "corpus", terms_per_utterance: tuple[int, int] = (1, 3)
                    ) -> tuple[Corpus, TermBank]:
    """Generate utterances, their frames and the term bank they draw from.

    ``stage_mix`` maps stages to weights. Utterances assigned to
    ``Stage.REAL_TERM`` get 1-3 bank terms spliced into a random transcript;
    the others are plain transcripts, whose word/phrase terms are drawn at
    batch time by :func:`sample_stage_terms`. Every bank term that occurs in
    a transcript is annotated, so annotations agree with a substring scan.
    Tokens that form single-token terms (plus ``reserved_tokens``) are never
    used as filler, so those terms only occur where they were spliced in.
    """
    if cfg.vocab_size < 50:
        raise ValueError("vocab_size must be at least 50")
    if bank is None and bank_size < 10:
        raise ValueError("bank_size must be at least 10")
    stage_mix = {Stage.REAL_TERM: 1.0} if stage_mix is None else {Stage(k): float(v) for k, v in stage_mix.items()}
    encoder = encoder or ToyEncoder(cfg)
    rng = substream(cfg.seed, label)
    if bank is None:
        if bank_size > max_constructible_terms(cfg):
            raise CapacityError(f"bank_size {bank_size} exceeds the {max_constructible_terms(cfg)} "
                                f"distinct terms constructible from vocab {cfg.vocab_size}")
        bank = make_bank(random_terms(cfg, bank_size, substream(cfg.seed, label + "/bank")))
    reserved = set(int(t) for t in reserved_tokens)
    reserved.update(e.token_ids[0] for e in bank if len(e.token_ids) == 1)
    filler = np.array(sorted(set(range(cfg.vocab_size)) - reserved), dtype=np.int64)
    if filler.size < 10:
        raise CapacityError("too few unreserved tokens left to build transcripts")

    stages = list(stage_mix)
    weights = np.array([stage_mix[s] for s in stages], dtype=np.float64)
    weights /= weights.sum()
    index = bank_index(bank)
    lo, hi = cfg.utterance_tokens
    utterances, features = [], {}
    width = max(5, len(str(n_utterances)))
    for i in range(n_utterances):
        stage = stages[int(rng.choice(len(stages), p=weights))]
        toks = [int(t) for t in filler[rng.integers(0, filler.size, int(rng.integers(lo, hi + 1)))]]
        if stage is Stage.REAL_TERM:
            k = int(rng.integers(terms_per_utterance[0], terms_per_utterance[1] + 1))
            for j in rng.choice(len(bank), size=min(k, len(bank)), replace=False):
                pos = int(rng.integers(0, len(toks) + 1))
                toks[pos:pos] = bank.entries[int(j)].token_ids
        uid = f"{label}-{i:0{width}d}"
        spans = annotate(toks, bank, index)
        utt = Utterance(uid, toks, spans, features=f"features/{uid}.a2pf")
        utterances.append(utt)
        features[uid] = SpeechFeatures(uid, encoder.render(toks, rng))
    return Corpus(utterances, features, bank, encoder), bank


# --------------------------------------------------------------------------
# curriculum samplers


@dataclass(frozen=True)
class StageTerm:
    tokens: tuple[int, ...]
    start: int
    term_id: int | None = None


def sample_stage_terms(utt: Utterance, stage: Stage, rng: np.random.Generator,
                       n_terms: tuple[int, int] = (1, 3)) -> list[StageTerm]:
    """Positive terms for one utterance under a curriculum stage.

    WORD draws single tokens, PHRASE draws spans of 1-4 consecutive tokens,
    REAL_TERM returns the annotated terms unchanged. Returned token sequences
    are distinct.
    """
    stage = Stage(stage)
    if stage is Stage.REAL_TERM:
        if not utt.terms:
            raise SkipUtterance(utt.id)
        return [StageTerm(tuple(utt.token_ids[s.start:s.end]), s.start, s.term_id) for s in utt.terms]
    n_tok = len(utt.token_ids)
    if n_tok < 4:
        raise ValueError(f"utterance {utt.id} has {n_tok} tokens; stage sampling needs at least 4")
    want = int(rng.integers(n_terms[0], n_terms[1] + 1))
    out: dict[tuple[int, ...], StageTerm] = {}
    for _ in range(4 * want):
        if len(out) == want:
            break
        L = 1 if stage is Stage.WORD else int(rng.integers(1, 5))
        start = int(rng.integers(0, n_tok - L + 1))
        toks = tuple(utt.token_ids[start:start + L])
        out.setdefault(toks, StageTerm(toks, start))
    return list(out.values())


# --------------------------------------------------------------------------
# feature files


def write_features(path, frames: np.ndarray | SpeechFeatures) -> None:
    if isinstance(frames, SpeechFeatures):
        frames = frames.frames[frames.frame_mask]
    a = np.ascontiguousarray(frames, dtype="<f4")
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise ValueError(f"feature matrix must be 2-D with positive dims, got {a.shape}")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, a.shape[0], a.shape[1]))
        fh.write(a.tobytes(order="C"))
    os.replace(tmp, path)


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FeatureFormatError("truncated header", len(buf))
    magic, version, dtype, rows, cols = _HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    if dtype != 0:
        raise FeatureFormatError(f"unsupported dtype code {dtype}", 6)
    if rows == 0 or cols == 0:
        raise FeatureFormatError(f"empty matrix {rows}x{cols}", 7)
    need = _HEADER.size + 4 * rows * cols
    if len(buf) < need:
        raise FeatureFormatError(f"payload truncated: expected {need} bytes, found {len(buf)}", len(buf))
    if len(buf) > need:
        raise FeatureFormatError(f"{len(buf) - need} trailing bytes after payload", need)
    a = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_HEADER.size).reshape(rows, cols)
    return a.astype(DTYPE)


def read_features(path, utterance_id: str | None = None) -> SpeechFeatures:
    frames = decode_features(Path(path).read_bytes())
    return SpeechFeatures(utterance_id or Path(path).stem, frames)


# --------------------------------------------------------------------------
# corpus directories


def _manifest_row(u: Utterance) -> dict:
    return {"id": u.id, "features": u.features, "tokens": list(u.token_ids),
            "terms": [{"term_id": s.term_id, "span": [s.start, s.end]} for s in u.terms]}


def write_manifest(path, utterances: Iterable[Utterance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utterances:
            fh.write(json.dumps(_manifest_row(u)) + "\n")


def read_manifest(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            spans = [TermSpan(int(t["term_id"]), int(t["span"][0]), int(t["span"][1])) for t in row["terms"]]
            out.append(Utterance(row["id"], [int(x) for x in row["tokens"]], spans, row["features"]))
    return out


def encoder_config_dict(cfg: ToyEncoderConfig) -> dict:
    return {"vocab_size": cfg.vocab_size, "embed_dim": cfg.embed_dim,
            "frames_per_token": list(cfg.frames_per_token), "noise_sigma": cfg.noise_sigma,
            "filler_rate": cfg.filler_rate, "seed": cfg.seed,
            "utterance_tokens": list(cfg.utterance_tokens), "term_lengths": list(cfg.term_lengths),
            "n_filler_kinds": cfg.n_filler_kinds}


def save_encoder(directory, encoder: ToyEncoder) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "encoder.json").write_text(json.dumps(encoder_config_dict(encoder.cfg), indent=1))
    write_features(directory / "embeddings.a2pf", encoder.table)


def load_encoder(directory) -> ToyEncoder:
    directory = Path(directory)
    raw = json.loads((directory / "encoder.json").read_text())
    raw["frames_per_token"] = tuple(raw["frames_per_token"])
    raw["utterance_tokens"] = tuple(raw["utterance_tokens"])
    raw["term_lengths"] = tuple(raw["term_lengths"])
    cfg = ToyEncoderConfig(**raw)
    return ToyEncoder(cfg, decode_features((directory / "embeddings.a2pf").read_bytes()))


def save_corpus(directory, corpus: Corpus) -> None:
    """Write ``manifest.jsonl``, ``bank.jsonl``, the encoder and one feature file per utterance."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    write_manifest(directory / "manifest.jsonl", corpus.utterances)
    corpus.bank.to_jsonl(directory / "bank.jsonl")
    save_encoder(directory, corpus.encoder)
    for u in corpus.utterances:
        write_features(directory / u.features, corpus.features[u.id])


def load_corpus(directory, bank_path=None) -> Corpus:
    directory = Path(directory)
    utterances = read_manifest(directory / "manifest.jsonl")
    bank = TermBank.from_jsonl(bank_path or directory / "bank.jsonl")
    encoder = load_encoder(directory)
    features = {u.id: read_features(directory / u.features, u.id) for u in utterances}
    return Corpus(utterances, features, bank, encoder)


# --------------------------------------------------------------------------
# benchmark split


@dataclass
class Benchmark:
    train: Corpus
    test: Corpus
    distractors: TermBank

    @property
    def encoder(self) -> ToyEncoder:
        return self.train.encoder


def build_benchmark(cfg: ToyEncoderConfig, n_train: int = 2000, n_test: int = 200,
                    test_bank_size: int = 583, train_bank_size: int = 1500,
                    n_distractors: int = 10_000 - 583, train_mix: dict | None = None) -> Benchmark:
    """Train/test corpora with disjoint term inventories, plus a distractor pool.

    Distractors never occur in any test transcript, so growing the test bank
    with them adds only true negatives.
    """
    encoder = ToyEncoder(cfg)
    rng = substream(cfg.seed, "benchmark/terms")
    seqs = random_terms(cfg, train_bank_size + test_bank_size, rng)
    train_bank = make_bank(seqs[:train_bank_size], first_id=0)
    test_bank = make_bank(seqs[train_bank_size:], first_id=100_000)
    reserved = {t[0] for t in seqs if len(t) == 1}
    mix = train_mix or {Stage.REAL_TERM: 1.0}
    train, _ = generate_corpus(cfg, n_train, 0, mix, bank=train_bank, reserved_tokens=reserved,
                               encoder=encoder, label="train")
    test, _ = generate_corpus(cfg, n_test, 0, {Stage.REAL_TERM: 1.0}, bank=test_bank,
                              reserved_tokens=reserved, encoder=encoder, label="test")
    distractors = _distractor_pool(cfg, n_distractors, test, exclude=seqs)
    return Benchmark(train, test, distractors)


def _distractor_pool(cfg: ToyEncoderConfig, n: int, test: Corpus, exclude) -> TermBank:
    rng = substream(cfg.seed, "benchmark/distractors")
    multi = dataclasses.replace(cfg, term_lengths=_without_single(cfg.term_lengths))
    taken = set(exclude)
    out: list[tuple[int, ...]] = []
    transcripts = [u.token_ids for u in test.utterances]
    while len(out) < n:
        for t in random_terms(multi, n - len(out), rng, exclude=taken):
            taken.add(t)
            if all(contains(tr, t) < 0 for tr in transcripts):
                out.append(t)
    return make_bank(out, first_id=200_000)


def _without_single(lengths: Sequence[float]) -> tuple[float, ...]:
    rest = np.array(lengths[1:], dtype=np.float64)
    return (0.0, *(rest / rest.sum()).tolist())
