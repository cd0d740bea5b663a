"""Cross-attention term-presence scorer.

Term tokens are the queries, speech frames the keys and values. Per-token
attention outputs are masked, summed over the term and divided by the term
length (+eps); the mean term embedding is added back as a residual and a
linear head with a sigmoid gives the presence probability.

Two code paths compute the same function:

* :func:`score_term` evaluates one (utterance, term) pair step by step and
  returns every intermediate in a :class:`ScoreTrace`;
* :class:`BatchScorer` scores a block of utterances against a block of terms
  at once and carries the hand-derived backward pass used for training. Since
  the head is linear, it never materialises the per-token outputs: the head
  direction is pushed through the output projection onto the values instead.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .corpus import SpeechFeatures, TermFeatures

POOLING_EPS = 1e-6
PROJECTIONS = ("Wq", "Wk", "Wv", "Wo")
BIASES = ("bq", "bk", "bv", "bo")
PARAM_NAMES = PROJECTIONS + BIASES + ("head_w", "head_b")

CHECKPOINT_MAGIC = b"A2PC"
CHECKPOINT_VERSION = 1


class DegenerateInputError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class RetrieverParams:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    bo: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    heads: int = 8
    dropout_p: float = 0.1

    def __post_init__(self):
        d = self.Wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"embed dim {d} is not divisible by {self.heads} heads")
        for name in PROJECTIONS:
            if getattr(self, name).shape != (d, d):
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")
        for name in BIASES + ("head_w",):
            if getattr(self, name).shape != (d,):
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {(d,)}")
        if np.shape(self.head_b) != (1,):
            self.head_b = np.asarray(self.head_b, dtype=self.Wq.dtype).reshape(1)

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, dropout_p: float = 0.1,
             dtype=nx.DTYPE) -> "RetrieverParams":
        """Projections ~ U(+-1/sqrt(d)), biases zero, head zero (so prob starts at 0.5)."""
        if d % heads:
            raise ConfigError(f"embed dim {d} is not divisible by {heads} heads")
        bound = 1.0 / math.sqrt(d)
        mats = {n: rng.uniform(-bound, bound, (d, d)).astype(dtype) for n in PROJECTIONS}
        vecs = {n: np.zeros(d, dtype) for n in BIASES + ("head_w",)}
        return cls(**mats, **vecs, head_b=np.zeros(1, dtype), heads=heads, dropout_p=dropout_p)

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def dtype(self):
        return self.Wq.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "RetrieverParams":
        return self.astype(self.dtype)

    def astype(self, dtype) -> "RetrieverParams":
        return RetrieverParams(**{n: np.array(a, dtype=dtype) for n, a in self.tensors().items()},
                               heads=self.heads, dropout_p=self.dropout_p)

    def zero_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(a) for n, a in self.tensors().items()}

    def n_params(self) -> int:
        return sum(a.size for a in self.tensors().values())


# --------------------------------------------------------------------------
# single pair, fully traced


@dataclass
class ScoreTrace:
    attn_weights: np.ndarray  # (H, L, T) post-softmax, pre-dropout; inspection only
    S_attn: np.ndarray
    S_masked: np.ndarray
    S_sum: np.ndarray
    M_sum: float
    S_pooled: np.ndarray
    S_final: np.ndarray
    logit: float
    prob: float


def score_term(params: RetrieverParams, speech: SpeechFeatures, term: TermFeatures,
               mode: str = "infer", rng: np.random.Generator | None = None,
               eps: float = POOLING_EPS, pooling: bool = True) -> ScoreTrace:
    """Score one term against one utterance and keep every intermediate.

    With ``pooling=False`` (ablation) the head is applied to each raw token
    row of the attention output, padded rows included, and the logits are
    averaged; no term mask, length normalisation or residual is used.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and params.dropout_p > 0 and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    ms = np.asarray(speech.frame_mask, bool)
    mt = np.asarray(term.token_mask, bool)
    if not ms.any() or not mt.any():
        raise DegenerateInputError("speech or term has no valid positions")
    dt = params.dtype
    hs = speech.frames.astype(dt)
    ht = term.tokens.astype(dt)
    H, dh = params.heads, params.head_dim
    scale = 1.0 / math.sqrt(dh)

    Q = nx.matmul(ht, params.Wq) + params.bq
    K = nx.matmul(hs, params.Wk) + params.bk
    V = nx.matmul(hs, params.Wv) + params.bv
    weights = np.empty((H, ht.shape[0], hs.shape[0]), dt)
    ctx = np.empty_like(Q)
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        A = nx.masked_softmax_rows(nx.matmul(Q[:, cols], K[:, cols].T) * dt.type(scale), ms)
        weights[h] = A
        if mode == "train" and params.dropout_p > 0:
            A = A * nx.dropout_mask(A.shape, params.dropout_p, rng, dt)
        ctx[:, cols] = nx.matmul(A, V[:, cols])
    S_attn = nx.matmul(ctx, params.Wo) + params.bo

    if not pooling:
        logits = S_attn.astype(np.float64) @ params.head_w.astype(np.float64) + float(params.head_b[0])
        logit = float(logits.mean())
        zeros = np.zeros(params.d, dt)
        return ScoreTrace(weights, S_attn, S_attn, zeros, float(len(mt)), zeros, zeros,
                          logit, float(nx.sigmoid(logit)))

    S_masked = S_attn * mt[:, None].astype(dt)
    S_sum = S_masked.astype(np.float64).sum(axis=0)
    M_sum = float(mt.sum())
    S_pooled = (S_sum / (M_sum + eps)).astype(dt)
    h_mean = (ht[mt].astype(np.float64).sum(axis=0) / M_sum).astype(dt)
    S_final = h_mean + S_pooled
    logit = float(S_final.astype(np.float64) @ params.head_w.astype(np.float64) + float(params.head_b[0]))
    return ScoreTrace(weights, S_attn, S_masked, S_sum.astype(dt), M_sum, S_pooled, S_final,
                      logit, float(nx.sigmoid(logit)))


# --------------------------------------------------------------------------
# batched kernel


def pad_stack(mats: Sequence[np.ndarray], masks: Sequence[np.ndarray] | None = None,
              dtype=nx.DTYPE, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length matrices into ``(N, Lmax, d)`` with a prefix mask."""
    L = length or max(m.shape[0] for m in mats)
    d = mats[0].shape[1]
    out = np.zeros((len(mats), L, d), dtype)
    mask = np.zeros((len(mats), L), bool)
    for i, m in enumerate(mats):
        n = m.shape[0] if masks is None else int(np.asarray(masks[i], bool).sum())
        out[i, :n] = m[:n]
        mask[i, :n] = True
    return out, mask


def stack_speech(speech: Sequence[SpeechFeatures], dtype=nx.DTYPE):
    return pad_stack([s.frames for s in speech], [s.frame_mask for s in speech], dtype)


def stack_terms(terms: Sequence[TermFeatures], dtype=nx.DTYPE):
    return pad_stack([t.tokens for t in terms], [t.token_mask for t in terms], dtype)


@dataclass
class BatchCache:
    S: np.ndarray
    rows: np.ndarray  # (N, d) term-token rows that take part in pooling
    pool: np.ndarray  # (C, N) pooling weights
    seg: np.ndarray  # (N,) owning term of each row
    alpha: np.ndarray  # (N,) pooling weight of each row
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    a: np.ndarray  # softmax output
    ad: np.ndarray  # after dropout (same array as ``a`` when dropout is off)
    abar: np.ndarray
    ctx: np.ndarray
    final: np.ndarray
    bo_coef: np.ndarray


class BatchScorer:
    """Logits for every (utterance, term) pair of a block, with backward.

    ``S`` is ``(U, Tf, d)`` with frame mask ``Sm``; ``T`` is ``(C, L, d)``
    with token mask ``Tm``. ``forward`` returns ``(U, C)`` logits.

    Only term rows that contribute to the pooled vector are attended with:
    the valid tokens when pooling, every padded row otherwise. Pooling is a
    ``(C, N)`` weight matrix applied to the per-row attention maps.
    """

    def __init__(self, params: RetrieverParams, eps: float = POOLING_EPS, pooling: bool = True):
        self.p = params
        self.eps = eps
        self.pooling = pooling
        self.cache: BatchCache | None = None

    def _term_rows(self, T: np.ndarray, Tm: np.ndarray, dt):
        C, L, d = T.shape
        if self.pooling:
            m = Tm.astype(np.float64)
            M = m.sum(axis=1)
            flat = Tm.reshape(-1)
            alpha = (m / (M + self.eps)[:, None]).reshape(-1)[flat]
            bo_coef = M / (M + self.eps)
            resid = (T.astype(np.float64) * m[..., None]).sum(axis=1) / M[:, None]
        else:
            flat = np.ones(C * L, bool)
            alpha = np.full(C * L, 1.0 / L)
            bo_coef = np.ones(C)
            resid = np.zeros((C, d))
        rows = T.reshape(C * L, d)[flat]
        seg = np.repeat(np.arange(C), L)[flat]
        pool = np.zeros((C, rows.shape[0]), dt)
        pool[seg, np.arange(rows.shape[0])] = alpha
        return rows, seg, alpha.astype(dt), pool, bo_coef.astype(dt), resid.astype(dt)

    def forward(self, S, Sm, T, Tm, mode: str = "infer", rng: np.random.Generator | None = None,
                drop: np.ndarray | None = None, keep: bool = False) -> np.ndarray:
        p = self.p
        dt = p.dtype
        S = np.asarray(S, dt)
        T = np.asarray(T, dt)
        Sm = np.asarray(Sm, bool)
        Tm = np.asarray(Tm, bool)
        if not Sm.any(axis=1).all():
            raise DegenerateInputError("an utterance in the batch has no valid frames")
        if not Tm.any(axis=1).all():
            raise DegenerateInputError("a term in the batch has no valid tokens")
        U, Tf, d = S.shape
        C = T.shape[0]
        H, dh = p.heads, p.head_dim
        scale = dt.type(1.0 / math.sqrt(dh))

        rows, seg, alpha, pool, bo_coef, resid = self._term_rows(T, Tm, dt)
        N = rows.shape[0]
        # attention scale folded into the queries
        q = ((rows @ p.Wq + p.bq) * scale).reshape(N, H, dh).transpose(1, 0, 2)
        S2 = S.reshape(U * Tf, d)
        k = (S2 @ p.Wk + p.bk).reshape(U, Tf, H, dh).transpose(0, 2, 1, 3)
        v = (S2 @ p.Wv + p.bv).reshape(U, Tf, H, dh).transpose(0, 2, 1, 3)

        a = np.matmul(q[None], k.transpose(0, 1, 3, 2))  # (U, H, N, Tf)
        if not Sm.all():
            a += np.where(Sm, 0.0, -np.inf).astype(dt)[:, None, None, :]
        a -= a.max(axis=-1, keepdims=True)
        np.exp(a, out=a)
        denom = a.sum(axis=-1, keepdims=True, dtype=np.float64)
        a /= denom.astype(dt)

        if mode == "train" and p.dropout_p > 0:
            if drop is None:
                if rng is None:
                    raise ValueError("train mode needs an rng or an explicit dropout mask")
                drop = nx.dropout_mask(a.shape, p.dropout_p, rng, dt)
            ad = a * drop
        else:
            drop = None
            ad = a

        abar = np.matmul(pool, ad)  # (U, H, C, Tf)
        ctx = np.matmul(abar, v).transpose(0, 2, 1, 3).reshape(U, C, d)  # pooled context
        pooled = ctx @ p.Wo + bo_coef[None, :, None] * p.bo
        final = pooled + resid[None]
        logits = final.astype(np.float64) @ p.head_w.astype(np.float64) + float(p.head_b[0])
        if keep:
            self.cache = BatchCache(S, rows, pool, seg, alpha, q, k, v, a, ad, abar, ctx, final, bo_coef)
        return logits

    def backward(self, g: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/dlogits`` of shape ``(U, C)``."""
        c = self.cache
        if c is None:
            raise RuntimeError("forward(keep=True) must run before backward")
        p = self.p
        dt = p.dtype
        g = np.asarray(g, np.float64)
        U, Tf, d = c.S.shape
        N = c.rows.shape[0]
        scale = dt.type(1.0 / math.sqrt(p.head_dim))
        w = p.head_w
        gd = g.astype(dt)

        grads: dict[str, np.ndarray] = {}
        grads["head_b"] = np.array([g.sum()], dt)
        grads["head_w"] = (g.reshape(-1) @ c.final.reshape(-1, d).astype(np.float64)).astype(dt)
        gctx = g.reshape(-1) @ c.ctx.reshape(-1, d).astype(np.float64)
        grads["Wo"] = np.outer(gctx, w).astype(dt)
        grads["bo"] = (float((g * c.bo_coef[None].astype(np.float64)).sum()) * w).astype(dt)

        u = (p.Wo @ w).reshape(p.heads, p.head_dim, 1)  # head direction seen from the value space
        s = np.matmul(c.v, u[None])[..., 0]  # (U, H, Tf) per-frame head score
        G = np.matmul(gd[:, None, None, :], c.abar)[:, :, 0, :]  # (U, H, Tf)
        dv = G[..., None] * u[None, :, None, :, 0]  # (U, H, Tf, dh)

        # d(scores) = g[u, seg[n]] alpha[n] * (ad * s - a * (ad @ s))
        gn = gd[:, c.seg] * c.alpha[None]  # (U, N)
        da = c.ad * s[:, :, None, :]
        da -= c.a * np.matmul(c.ad, s[..., None])
        da *= gn[:, None, :, None]

        dq = np.matmul(da, c.k).sum(axis=0) * scale  # (H, N, dh), unscaled query grad
        dk = np.matmul(da.transpose(0, 1, 3, 2), c.q[None])  # (U, H, Tf, dh)

        dq2 = dq.transpose(1, 0, 2).reshape(N, d)
        dk2 = dk.transpose(0, 2, 1, 3).reshape(U * Tf, d)
        dv2 = dv.transpose(0, 2, 1, 3).reshape(U * Tf, d)
        S2 = c.S.reshape(U * Tf, d)
        grads["Wq"] = nx.matmul(c.rows.T, dq2)
        grads["bq"] = dq2.sum(axis=0, dtype=np.float64).astype(dt)
        grads["Wk"] = nx.matmul(S2.T, dk2)
        grads["bk"] = dk2.sum(axis=0, dtype=np.float64).astype(dt)
        grads["Wv"] = nx.matmul(S2.T, dv2)
        grads["bv"] = dv2.sum(axis=0, dtype=np.float64).astype(dt)
        return grads


def score_bank(params: RetrieverParams, speech: SpeechFeatures, terms: Sequence[TermFeatures],
               batch: int = 32, eps: float = POOLING_EPS, pooling: bool = True) -> np.ndarray:
    """Presence probabilities of every term for one utterance, ``batch`` terms at a time."""
    if not terms:
        raise ValueError("term bank is empty")
    return nx.sigmoid(bank_logits(params, speech, terms, batch, eps, pooling))


def bank_logits(params, speech, terms, batch=32, eps=POOLING_EPS, pooling=True) -> np.ndarray:
    scorer = BatchScorer(params, eps, pooling)
    S, Sm = stack_speech([speech], params.dtype)
    out = np.empty(len(terms), np.float64)
    for lo in range(0, len(terms), batch):
        chunk = terms[lo:lo + batch]
        T, Tm = stack_terms(chunk, params.dtype)
        try:
            out[lo:lo + len(chunk)] = scorer.forward(S, Sm, T, Tm)[0]
        except DegenerateInputError as exc:
            bad = [t.term_id for t in chunk if not np.asarray(t.token_mask).any()]
            raise DegenerateInputError(f"{exc} (term ids {bad or [t.term_id for t in chunk]})") from exc
    return out


# --------------------------------------------------------------------------
# checkpoints

_CKPT_PREFIX = struct.Struct("<4sI")


def save_checkpoint(path, params: RetrieverParams, extra: dict | None = None) -> None:
    """Named-tensor container: magic, JSON header length, JSON header, raw f32 payload."""
    tensors = []
    blobs = []
    offset = 0
    for name, a in params.tensors().items():
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(a.shape), "dtype": "f32",
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": CHECKPOINT_VERSION, "d": params.d, "heads": params.heads,
              "dropout_p": params.dropout_p, "tensors": tensors, "extra": extra or {}}
    hbytes = json.dumps(header).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CHECKPOINT_MAGIC, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    buf = Path(path).read_bytes()
    return _parse_header(buf, path)[0]


def _parse_header(buf: bytes, path) -> tuple[dict, int]:
    if len(buf) < _CKPT_PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated checkpoint prefix")
    magic, hlen = _CKPT_PREFIX.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    start = _CKPT_PREFIX.size
    try:
        header = json.loads(buf[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header, start + hlen


def load_checkpoint(path, expect_d: int | None = None, expect_heads: int | None = None) -> RetrieverParams:
    buf = Path(path).read_bytes()
    header, base = _parse_header(buf, path)
    d, heads = int(header["d"]), int(header["heads"])
    if expect_d is not None and d != expect_d:
        raise ConfigError(f"checkpoint {path} has d={d}, engine expects d={expect_d}")
    if expect_heads is not None and heads != expect_heads:
        raise ConfigError(f"checkpoint {path} has {heads} heads, engine expects {expect_heads}")
    shapes = {n: (d, d) for n in PROJECTIONS} | {n: (d,) for n in BIASES + ("head_w",)} | {"head_b": (1,)}
    arrays = {}
    for t in header["tensors"]:
        name = t["name"]
        if name not in shapes:
            raise CheckpointFormatError(f"{path}: unknown tensor {name!r}")
        want = int(np.prod(shapes[name])) * 4
        if tuple(t["shape"]) != shapes[name] or t["nbytes"] != want:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has {t['nbytes']} bytes / shape "
                                        f"{t['shape']}, expected {want} bytes / shape {list(shapes[name])}")
        lo = base + int(t["offset"])
        if lo + want > len(buf):
            raise CheckpointFormatError(f"{path}: tensor {name!r} runs past the end of the file")
        arrays[name] = np.frombuffer(buf, "<f4", count=want // 4, offset=lo).reshape(shapes[name]).astype(nx.DTYPE)
    missing = set(shapes) - set(arrays)
    if missing:
        raise CheckpointFormatError(f"{path}: missing tensors {sorted(missing)}")
    for name, a in arrays.items():
        if not np.isfinite(a).all():
            raise CheckpointFormatError(f"{path}: tensor {name!r} has non-finite values")
    return RetrieverParams(**arrays, heads=heads, dropout_p=float(header["dropout_p"]))


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckReport:
    d: int
    heads: int
    frames: int
    tokens: int
    dropout: bool
    max_rel_error: float
    per_tensor: dict[str, float]


def gradcheck(d: int = 16, heads: int = 4, frames: int = 5, tokens: int = 3, seed: int = 0,
              n_utterances: int = 2, n_terms: int = 3, dropout: bool = False, pooling: bool = True,
              eps: float = 1e-4) -> GradcheckReport:
    """Central-difference check of :meth:`BatchScorer.backward` on a random float64 instance.

    Lengths are drawn up to ``frames``/``tokens`` so padding is exercised.
    Every parameter is randomised (biases and head included). The loss is a
    fixed random linear functional of the logits; with ``dropout`` a fixed
    dropout mask is used in train mode.
    """
    rng = np.random.default_rng(seed)
    p = RetrieverParams.init(d, heads, rng, dropout_p=0.25 if dropout else 0.0).astype(np.float64)
    for name in BIASES + ("head_w",):
        getattr(p, name)[:] = rng.normal(0.0, 0.5, d)
    p.head_b[:] = rng.normal()
    speech = [SpeechFeatures(f"u{i}", rng.standard_normal((frames, d)),
                             np.arange(frames) < rng.integers(1, frames + 1)) for i in range(n_utterances)]
    speech[0] = SpeechFeatures("u0", speech[0].frames)  # at least one full-length utterance
    terms = [TermFeatures(i, rng.standard_normal((tokens, d)), np.arange(tokens) < rng.integers(1, tokens + 1))
             for i in range(n_terms)]
    S, Sm = stack_speech(speech, np.float64)
    T, Tm = stack_terms(terms, np.float64)
    scorer = BatchScorer(p, pooling=pooling)
    mode = "train" if dropout else "infer"
    n_rows = int(Tm.sum()) if pooling else Tm.size
    drop = nx.dropout_mask((n_utterances, heads, n_rows, S.shape[1]), p.dropout_p, rng, np.float64) \
        if dropout else None
    coef = rng.standard_normal((n_utterances, n_terms))

    def loss() -> float:
        return float((scorer.forward(S, Sm, T, Tm, mode=mode, drop=drop) * coef).sum())

    scorer.forward(S, Sm, T, Tm, mode=mode, drop=drop, keep=True)
    grads = scorer.backward(coef)
    per = {n: nx.finite_diff_check(loss, {n: a}, grads, eps) for n, a in p.tensors().items()}
    return GradcheckReport(d, heads, S.shape[1], T.shape[1], dropout, max(per.values()), per)
