"""Prediction networks: CTC projection, transducer prediction + joint network, attention decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .nn import LSTM, Embedding, Linear, Module, length_mask
from .tensor import Tensor
from .vocab import BLANK, EOS, SOS

NEG_LARGE = -1e9


@dataclass
class HeadConfig:
    """Decoder settings.

    ``kind`` is ``ctc``, ``transducer`` or ``attention``; ``attention_type`` is
    ``additive`` (used with BLSTM encoders) or ``dot`` (multi-head scaled dot
    product, used with Conformer encoders).
    """

    kind: str = "transducer"
    embed_dim: int = 128
    lstm_dim: int = 640
    joint_dim: int = 640
    attention_type: str = "dot"
    attention_dim: int = 512
    attention_heads: int = 8

    def __post_init__(self):
        if self.kind not in ("ctc", "transducer", "attention"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.attention_type not in ("additive", "dot"):
            raise ValueError(f"unknown attention type {self.attention_type!r}")
        if self.attention_type == "dot" and self.attention_dim % self.attention_heads:
            raise ValueError("attention_dim must be divisible by attention_heads")


def default_head_config(encoder: str, kind: str) -> HeadConfig:
    """Decoder sizes paired with each encoder family."""
    if encoder == "blstm":
        return HeadConfig(kind, 128, 1280, 1280, "additive", 128, 1)
    return HeadConfig(kind, 128, 640, 640, "dot", 512, 8)


class CtcHead(Module):
    def __init__(self, d_enc: int, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(d_enc, vocab_size, rng)

    def __call__(self, x) -> Tensor:
        """(…, d_enc) -> (…, vocab) log-probabilities."""
        x = T.as_tensor(x)
        if x.shape[-1] != self.proj.weight.shape[0]:
            raise T.ShapeError(f"CTC head expects d_enc={self.proj.weight.shape[0]}, got {x.shape[-1]}")
        return T.log_softmax(self.proj(x), axis=-1)


ctc_logits = CtcHead.__call__


class TransducerHead(Module):
    """Embedding + one LSTM over the label prefix, and the joint network

    joint(enc, pred) = W_out tanh(W_enc enc + W_pred pred) + b.
    """

    def __init__(self, d_enc: int, vocab_size: int, cfg: HeadConfig, rng: np.random.Generator):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = Embedding(vocab_size, cfg.embed_dim, rng)
        self.pred = LSTM(cfg.embed_dim, cfg.lstm_dim, rng)
        self.enc_proj = Linear(d_enc, cfg.joint_dim, rng)
        self.pred_proj = Linear(cfg.lstm_dim, cfg.joint_dim, rng, bias=False)
        self.out = Linear(cfg.joint_dim, vocab_size, rng)

    def prediction(self, prefixes: np.ndarray) -> Tensor:
        """(B, U+1) ids starting with SOS -> (B, U+1, lstm_dim) prediction states."""
        out, _ = self.pred.run(self.embed(prefixes))
        return out

    def joint(self, enc_proj: Tensor, pred_proj: Tensor) -> Tensor:
        """Raw logits from already-projected encoder and prediction vectors (broadcast)."""
        return self.out(T.tanh(enc_proj + pred_proj))

    def lattice_log_probs(self, enc: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
        """(B, T, d_enc) encoder output -> (B, T, U+1, V) log-probs for the loss."""
        b = enc.shape[0]
        u_max = max((len(y) for y in targets), default=0)
        prefixes = np.full((b, u_max + 1), SOS, dtype=np.int64)
        for i, y in enumerate(targets):
            prefixes[i, 1:len(y) + 1] = y
        pred = self.pred_proj(self.prediction(prefixes))
        enc_p = self.enc_proj(enc)
        logits = self.joint(T.reshape(enc_p, (b, enc.shape[1], 1, -1)),
                            T.reshape(pred, (b, 1, u_max + 1, -1)))
        return T.log_softmax(logits, axis=-1)

    # incremental interface used by search

    def start(self, batch: int = 1) -> Tuple[np.ndarray, tuple]:
        state = self.pred.initial_state(batch)
        return self.pred_step(np.full(batch, SOS), state)

    def pred_step(self, tokens: np.ndarray, state) -> Tuple[np.ndarray, tuple]:
        h, c = self.pred.step(self.embed(np.asarray(tokens)), state)
        return h.data, (h, c)

    def joint_step(self, enc_frames, pred_out) -> np.ndarray:
        """(N, d_enc) frames and (N, lstm_dim) prediction outputs -> (N, V) raw logits."""
        return self.joint(self.enc_proj(enc_frames), self.pred_proj(T.as_tensor(pred_out))).data


class PredictionCache:
    """Prediction-network outputs keyed by label prefix, so lattice cells sharing a prefix share work."""

    def __init__(self, head: TransducerHead):
        self.head = head
        self.store: Dict[tuple, tuple] = {}
        self.misses = 0

    def get(self, prefix: tuple) -> tuple:
        if prefix in self.store:
            return self.store[prefix]
        if not prefix:
            out, state = self.head.start(1)
        else:
            _, parent_state = self.get(prefix[:-1])
            out, state = self.head.pred_step(np.array([prefix[-1]]), parent_state)
        self.misses += 1
        self.store[prefix] = (out, state)
        return out, state

    def get_many(self, prefixes: Sequence[tuple]) -> np.ndarray:
        """Stack outputs for several prefixes, computing missing ones in one batched step."""
        missing = [p for p in dict.fromkeys(prefixes) if p not in self.store]
        ready = [p for p in missing if not p or p[:-1] in self.store]
        for p in missing:
            if p not in ready:
                self.get(p)
        ready = [p for p in ready if p not in self.store]
        if ready:
            empties = [p for p in ready if not p]
            for p in empties:
                self.get(p)
            rest = [p for p in ready if p]
            if rest:
                hs = T.Tensor(np.concatenate([self.store[p[:-1]][1][0].data for p in rest]))
                cs = T.Tensor(np.concatenate([self.store[p[:-1]][1][1].data for p in rest]))
                out, (h, c) = self.head.pred_step(np.array([p[-1] for p in rest]), (hs, cs))
                self.misses += len(rest)
                for i, p in enumerate(rest):
                    self.store[p] = (out[i:i + 1], (T.Tensor(h.data[i:i + 1]), T.Tensor(c.data[i:i + 1])))
        return np.concatenate([self.store[p][0] for p in prefixes])


def transducer_logits(x_t, prefix: Sequence[int], head: TransducerHead,
                      cache: Optional[PredictionCache] = None) -> np.ndarray:
    """Raw joint logits (vocab incl. blank) for one encoder frame given a label prefix.

    Without a cache the prediction network is replayed from SOS with the same
    per-step cell, so cached and uncached results agree bitwise.
    """
    prefix = tuple(int(p) for p in prefix)
    if BLANK in prefix:
        raise ValueError("transducer prefix must not contain the blank id")
    with T.no_grad():
        cache = cache if cache is not None else PredictionCache(head)
        g, _ = cache.get(prefix)
        frame = np.asarray(T.as_tensor(x_t).data).reshape(1, -1)
        return head.joint_step(frame, g)[0]


class AdditiveAttention(Module):
    """score_j = w . tanh(W_q s + W_k h_j); context is the weighted sum of raw encoder frames."""

    def __init__(self, d_query: int, d_enc: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.w_q = Linear(d_query, dim, rng)
        self.w_k = Linear(d_enc, dim, rng, bias=False)
        self.w = Linear(dim, 1, rng, bias=False)
        self.d_context = d_enc

    def precompute(self, enc: Tensor) -> dict:
        return {"keys": self.w_k(enc), "values": enc}

    def __call__(self, query: Tensor, cache: dict, mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        q = T.reshape(self.w_q(query), (query.shape[0], 1, -1))
        scores = T.reshape(self.w(T.tanh(cache["keys"] + q)), (query.shape[0], -1))
        weights = T.softmax(T.masked_fill(scores, ~mask, NEG_LARGE), axis=-1)
        ctx = T.reshape(T.matmul(T.reshape(weights, (query.shape[0], 1, -1)), cache["values"]),
                        (query.shape[0], -1))
        return ctx, weights


class DotAttention(Module):
    """Multi-head scaled dot-product attention of the decoder state over encoder frames."""

    def __init__(self, d_query: int, d_enc: int, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.h = heads
        self.dk = dim // heads
        self.w_q = Linear(d_query, dim, rng)
        self.w_k = Linear(d_enc, dim, rng)
        self.w_v = Linear(d_enc, dim, rng)
        self.w_out = Linear(dim, dim, rng)
        self.d_context = dim

    def precompute(self, enc: Tensor) -> dict:
        b, t, _ = enc.shape

        def split(x):
            return T.transpose(T.reshape(x, (b, t, self.h, self.dk)), (0, 2, 1, 3))

        return {"keys": split(self.w_k(enc)), "values": split(self.w_v(enc))}

    def __call__(self, query: Tensor, cache: dict, mask: np.ndarray) -> Tuple[Tensor, Tensor]:
        n = query.shape[0]
        q = T.reshape(self.w_q(query), (n, self.h, 1, self.dk))
        scores = T.matmul(q, T.swapaxes(cache["keys"], -1, -2)) * (1.0 / math.sqrt(self.dk))
        weights = T.softmax(T.masked_fill(scores, ~mask[:, None, None, :], NEG_LARGE), axis=-1)
        ctx = T.reshape(T.matmul(weights, cache["values"]), (n, self.h * self.dk))
        return self.w_out(ctx), T.reshape(weights, (n, self.h, -1))


@dataclass
class AttentionState:
    h: Tensor
    c: Tensor
    context: Tensor

    def select(self, idx) -> "AttentionState":
        return AttentionState(T.Tensor(self.h.data[idx]), T.Tensor(self.c.data[idx]),
                              T.Tensor(self.context.data[idx]))


class AttentionDecoder(Module):
    """Attend/Spell decoder with input feeding.

    Each step feeds [embedding(previous token); previous context] into the LSTM,
    attends with the new LSTM output, and predicts from [LSTM output; context].
    """

    def __init__(self, d_enc: int, vocab_size: int, cfg: HeadConfig, rng: np.random.Generator):
        super().__init__()
        self.vocab_size = vocab_size
        if cfg.attention_type == "additive":
            self.attention = AdditiveAttention(cfg.lstm_dim, d_enc, cfg.attention_dim, rng)
        else:
            self.attention = DotAttention(cfg.lstm_dim, d_enc, cfg.attention_dim, cfg.attention_heads, rng)
        d_ctx = self.attention.d_context
        self.embed = Embedding(vocab_size, cfg.embed_dim, rng)
        self.lstm = LSTM(cfg.embed_dim + d_ctx, cfg.lstm_dim, rng)
        self.out = Linear(cfg.lstm_dim + d_ctx, vocab_size, rng)

    def precompute(self, enc: Tensor, lengths) -> dict:
        if enc.shape[1] == 0:
            raise ValueError("attention decoder needs at least one encoder frame")
        cache = self.attention.precompute(enc)
        cache["mask"] = length_mask(lengths, enc.shape[1])
        return cache

    def initial_state(self, batch: int) -> AttentionState:
        h, c = self.lstm.initial_state(batch)
        return AttentionState(h, c, T.Tensor(np.zeros((batch, self.attention.d_context))))

    def step(self, tokens, state: AttentionState, cache: dict):
        """One decoding step -> (raw logits (N, V), new state, attention weights)."""
        emb = self.embed(np.asarray(tokens))
        h, c = self.lstm.step(T.concat([emb, state.context], axis=-1), (state.h, state.c))
        ctx, weights = self.attention(h, cache, cache["mask"])
        logits = self.out(T.concat([h, ctx], axis=-1))
        return logits, AttentionState(h, c, ctx), weights

    def teacher_forced(self, enc: Tensor, lengths, prefixes: np.ndarray) -> Tensor:
        """(B, L) input ids (SOS-framed gold prefixes) -> (B, L, V) log-probs."""
        cache = self.precompute(enc, lengths)
        state = self.initial_state(enc.shape[0])
        steps = []
        for i in range(prefixes.shape[1]):
            logits, state, _ = self.step(prefixes[:, i], state, cache)
            steps.append(T.log_softmax(logits, axis=-1))
        return T.stack(steps, axis=1)

    def select_cache(self, cache: dict, idx) -> dict:
        return {k: (T.Tensor(v.data[idx]) if isinstance(v, Tensor) else v[idx]) for k, v in cache.items()}


def frame_with_sos(targets: Sequence[Sequence[int]]) -> Tuple[np.ndarray, list]:
    """Decoder inputs [SOS, y...] (padded with EOS) and outputs [y..., EOS]."""
    outputs = [list(y) + [EOS] for y in targets]
    l_max = max(len(y) for y in outputs)
    inputs = np.full((len(targets), l_max), EOS, dtype=np.int64)
    for i, y in enumerate(targets):
        inputs[i, 0] = SOS
        inputs[i, 1:len(y) + 1] = y
    return inputs, outputs


def attend_spell(x, prefix: Sequence[int], decoder: AttentionDecoder) -> np.ndarray:
    """Log-probabilities of the next token for a single utterance.

    ``x`` is (T', d_enc); ``prefix`` must start with SOS.
    """
    x = T.as_tensor(x)
    prefix = list(prefix)
    if not prefix or prefix[0] != SOS:
        raise ValueError("attention prefix must start with SOS")
    with T.no_grad():
        enc = T.reshape(x, (1,) + x.shape)
        lp = decoder.teacher_forced(enc, [x.shape[0]], np.array([prefix]))
    return lp.data[0, -1]


def build_head(cfg: HeadConfig, d_enc: int, vocab_size: int, rng: np.random.Generator):
    if cfg.kind == "ctc":
        return CtcHead(d_enc, vocab_size, rng)
    if cfg.kind == "transducer":
        return TransducerHead(d_enc, vocab_size, cfg, rng)
    return AttentionDecoder(d_enc, vocab_size, cfg, rng)
