"""Greedy and beam-search decoding for the three decoder families."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .heads import PredictionCache
from .losses import collapse
from .vocab import BLANK, EOS, SOS


@dataclass(frozen=True)
class SearchConfig:
    beam_width: int = 8
    eos_logit_threshold: float = 5.0
    max_output_length: Optional[int] = None  # None: number of encoder frames
    max_symbols_per_frame: int = 4

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.max_symbols_per_frame < 1:
            raise ValueError("max_symbols_per_frame must be >= 1")


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    state: Any = None
    finished: bool = True


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _top(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best finite scores; ties go to the lower index."""
    order = np.argsort(-scores, kind="stable")
    order = order[np.isfinite(scores[order])]
    return order[:k]


def ctc_greedy(log_probs, blank: int = BLANK) -> List[int]:
    """Per-frame argmax (lowest id wins ties), then collapse."""
    return collapse(np.argmax(np.asarray(log_probs), axis=-1).tolist(), blank)


def ctc_greedy_hypothesis(log_probs, blank: int = BLANK) -> Hypothesis:
    lp = np.asarray(log_probs)
    best = np.argmax(lp, axis=-1)
    return Hypothesis(tuple(collapse(best.tolist(), blank)), float(lp[np.arange(len(best)), best].sum()))


# ---------------------------------------------------------------------------
# attention decoder
# ---------------------------------------------------------------------------


def _allowed(logits: np.ndarray, cfg: SearchConfig) -> np.ndarray:
    ok = np.ones(logits.shape, dtype=bool)
    ok[:, BLANK] = False
    ok[:, SOS] = False
    ok[:, EOS] = logits[:, EOS] >= cfg.eos_logit_threshold
    return ok


class _AttentionRunner:
    """Batched single-step scoring of attention hypotheses for one utterance."""

    def __init__(self, decoder, enc):
        self.decoder = decoder
        enc = T.as_tensor(enc)
        if enc.ndim != 2 or enc.shape[0] == 0:
            raise ValueError(f"expected a non-empty (T', d) encoder output, got {enc.shape}")
        self.num_frames = enc.shape[0]
        self.cache = decoder.precompute(T.reshape(enc, (1,) + enc.shape), [enc.shape[0]])

    def initial(self):
        return self.decoder.initial_state(1)

    def step(self, hyps: Sequence[Hypothesis]):
        n = len(hyps)
        tokens = np.array([h.tokens[-1] if h.tokens else SOS for h in hyps])
        state = _stack_states([h.state for h in hyps])
        cache = self.decoder.select_cache(self.cache, np.zeros(n, dtype=np.int64))
        logits, new_state, _ = self.decoder.step(tokens, state, cache)
        return np.asarray(T.as_tensor(logits).data), new_state


def _stack_states(states):
    first = states[0]
    if len(states) == 1:
        return first
    fields = {k: T.Tensor(np.concatenate([getattr(s, k).data for s in states]))
              for k in vars(first)}
    return type(first)(**fields)


def attention_greedy(enc, decoder, cfg: SearchConfig = SearchConfig()) -> Hypothesis:
    with T.no_grad():
        run = _AttentionRunner(decoder, enc)
        max_len = cfg.max_output_length or run.num_frames
        hyp = Hypothesis((), 0.0, run.initial(), False)
        for _ in range(max_len):
            logits, state = run.step([hyp])
            lp = _log_softmax(logits)[0]
            masked = np.where(_allowed(logits, cfg)[0], lp, -np.inf)
            k = int(np.argmax(masked))
            if k == EOS:
                return Hypothesis(hyp.tokens, hyp.score + lp[k], None, True)
            hyp = Hypothesis(hyp.tokens + (k,), hyp.score + lp[k], state, False)
        return hyp


def attention_beam(enc, decoder, cfg: SearchConfig = SearchConfig()) -> List[Hypothesis]:
    """Label-synchronous beam search with the EOS-logit gate.

    Every step scores all (hypothesis, token) extensions jointly and keeps the
    best ``beam_width``; chosen EOS extensions retire as finished. Search ends
    when nothing is alive, when no live hypothesis can overtake the best
    finished one (scores only decrease), or at the length limit.
    """
    with T.no_grad():
        run = _AttentionRunner(decoder, enc)
        max_len = cfg.max_output_length or run.num_frames
        alive = [Hypothesis((), 0.0, run.initial(), False)]
        finished: List[Hypothesis] = []
        for _ in range(max_len):
            logits, state = run.step(alive)
            lp = _log_softmax(logits)
            scores = np.array([h.score for h in alive])[:, None] + lp
            scores = np.where(_allowed(logits, cfg), scores, -np.inf)
            v = scores.shape[1]
            nxt = []
            for flat in _top(scores.ravel(), cfg.beam_width):
                i, k = divmod(int(flat), v)
                if k == EOS:
                    finished.append(Hypothesis(alive[i].tokens, float(scores[i, k]), None, True))
                else:
                    nxt.append(Hypothesis(alive[i].tokens + (k,), float(scores[i, k]),
                                          state.select(slice(i, i + 1)), False))
            alive = nxt
            if not alive:
                break
            if finished and max(h.score for h in finished) >= max(h.score for h in alive):
                break
        pool = finished if finished else alive
        pool = sorted(pool, key=lambda h: -h.score)
        return pool[:cfg.beam_width]


# ---------------------------------------------------------------------------
# transducer
# ---------------------------------------------------------------------------


def _label_ids(vocab_size: int, labels) -> np.ndarray:
    if labels is not None:
        return np.asarray(sorted(labels), dtype=np.int64)
    return np.array([i for i in range(vocab_size) if i not in (BLANK, SOS, EOS)], dtype=np.int64)


def transducer_greedy(enc, head, cfg: SearchConfig = SearchConfig(), labels=None) -> Hypothesis:
    """Per frame, emit argmax symbols until blank or the per-frame cap; at the cap
    the frame is closed with a blank (its probability is added to the score)."""
    enc = np.asarray(T.as_tensor(enc).data)
    ids = _label_ids(head.vocab_size, labels)
    cache = PredictionCache(head)
    tokens: tuple = ()
    score = 0.0
    with T.no_grad():
        for t in range(enc.shape[0]):
            for emitted in range(cfg.max_symbols_per_frame + 1):
                g, _ = cache.get(tokens)
                lp = _log_softmax(head.joint_step(enc[t:t + 1], g))[0]
                if emitted == cfg.max_symbols_per_frame:
                    score += lp[BLANK]
                    break
                masked = np.full_like(lp, -np.inf)
                masked[BLANK] = lp[BLANK]
                masked[ids] = lp[ids]
                k = int(np.argmax(masked))
                score += lp[k]
                if k == BLANK:
                    break
                tokens = tokens + (k,)
    return Hypothesis(tokens, float(score))


def transducer_beam(enc, head, cfg: SearchConfig = SearchConfig(), labels=None) -> List[Hypothesis]:
    """Time-synchronous beam search over the transducer lattice.

    Within a frame, hypotheses that have closed the frame with a blank compete
    with hypotheses still emitting labels for the ``beam_width`` slots; any
    prefix reached more than once is merged by log-sum-exp of its scores.
    """
    enc = np.asarray(T.as_tensor(enc).data)
    ids = _label_ids(head.vocab_size, labels)
    cap = cfg.max_symbols_per_frame
    cache = PredictionCache(head)
    beam = {(): 0.0}
    with T.no_grad():
        for t in range(enc.shape[0]):
            done: dict = {}
            frontier = beam
            for emitted in range(cap + 1):
                if not frontier:
                    break
                prefixes = list(frontier)
                g = cache.get_many(prefixes)
                lp = _log_softmax(head.joint_step(np.repeat(enc[t:t + 1], len(prefixes), 0), g))
                grown = {}
                for i, p in enumerate(prefixes):
                    s = frontier[p]
                    done[p] = np.logaddexp(done.get(p, -np.inf), s + lp[i, BLANK])
                    if emitted < cap:
                        for k in ids:
                            grown[p + (int(k),)] = s + lp[i, k]
                items = [(p, s, True) for p, s in done.items()] + [(p, s, False) for p, s in grown.items()]
                keep = _top(np.array([s for _, s, _ in items]), cfg.beam_width)
                done = {items[j][0]: items[j][1] for j in keep if items[j][2]}
                frontier = {items[j][0]: items[j][1] for j in keep if not items[j][2]}
            beam = done
    ranked = sorted(beam.items(), key=lambda kv: -kv[1])
    return [Hypothesis(p, float(s)) for p, s in ranked[:cfg.beam_width]]
