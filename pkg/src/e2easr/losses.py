"""CTC, transducer and attention losses in log space with exact gradients.

The lattice functions work on plain numpy log-probability arrays and return
the loss, its gradient with respect to those log-probabilities, and the
alpha/beta tables.  The ``batch_*`` functions wrap them as autodiff nodes for
training.  Enumeration oracles are kept next to the fast paths so the two can
be compared directly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .vocab import BLANK

NEG_INF = -np.inf


@dataclass
class LatticeResult:
    """Outcome of one forward-backward pass.

    ``loss`` is ``+inf`` exactly when no alignment can produce the target
    (``reachable`` is then false and ``grad`` is all zeros).
    """

    loss: float
    grad: np.ndarray
    log_alpha: np.ndarray
    log_beta: np.ndarray
    reachable: bool = True

    @property
    def log_likelihood(self) -> float:
        return -self.loss


def collapse(path: Sequence[int], blank: int = BLANK) -> List[int]:
    """CTC many-to-one map: merge runs of repeated ids, then drop blanks."""
    out = []
    prev = None
    for z in path:
        z = int(z)
        if z != prev and z != blank:
            out.append(z)
        prev = z
    return out


def ctc_min_frames(target: Sequence[int]) -> int:
    """Fewest frames able to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def _lse3(a, b, c):
    with np.errstate(invalid="ignore"):
        return np.logaddexp(np.logaddexp(a, b), c)


def _ctc_tables(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray, lengths: np.ndarray,
                ext_len: np.ndarray):
    """Batched alpha/beta over blank-interleaved label strings.

    lp: (B, T, V) log-probs; ext: (B, S) extended labels; skip: (B, S) whether
    state s may be entered from s - 2.  Beta excludes the emission at its own
    frame, so alpha + beta at any frame sums to the total log-likelihood.
    """
    b, t_max, _ = lp.shape
    s_max = ext.shape[1]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (b, t_max, s_max)), axis=2)
    alpha = np.full((b, t_max, s_max), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = np.where(ext_len > 1, emit[:, 0, 1], NEG_INF)
    neg = np.full((b, 1), NEG_INF)
    neg2 = np.full((b, 2), NEG_INF)
    for t in range(1, t_max):
        prev = alpha[:, t - 1]
        shift1 = np.concatenate([neg, prev[:, :-1]], axis=1)
        shift2 = np.where(skip, np.concatenate([neg2, prev[:, :-2]], axis=1)[:, :s_max], NEG_INF)
        alpha[:, t] = _lse3(prev, shift1, shift2) + emit[:, t]

    beta = np.full((b, t_max, s_max), NEG_INF)
    rows = np.arange(b)
    final = np.full((b, s_max), NEG_INF)
    final[rows, ext_len - 1] = 0.0
    has_two = ext_len > 1
    final[rows[has_two], ext_len[has_two] - 2] = 0.0
    skip_next = np.concatenate([skip[:, 2:], np.zeros((b, 2), dtype=bool)], axis=1)[:, :s_max]
    for t in range(t_max - 1, -1, -1):
        if t < t_max - 1:
            nxt = beta[:, t + 1] + emit[:, t + 1]
            sh1 = np.concatenate([nxt[:, 1:], neg], axis=1)
            sh2 = np.where(skip_next, np.concatenate([nxt[:, 2:], neg2], axis=1)[:, :s_max], NEG_INF)
            beta[:, t] = _lse3(nxt, sh1, sh2)
        beta[:, t] = np.where((lengths - 1 == t)[:, None], final, beta[:, t])
    last = alpha[rows, lengths - 1]
    logz = np.logaddexp(last[rows, ext_len - 1],
                        np.where(has_two, last[rows, np.maximum(ext_len - 2, 0)], NEG_INF))
    return alpha, beta, logz, emit


def _extend(targets: Sequence[Sequence[int]], blank: int):
    s_max = 2 * max((len(y) for y in targets), default=0) + 1
    b = len(targets)
    ext = np.full((b, s_max), blank, dtype=np.int64)
    skip = np.zeros((b, s_max), dtype=bool)
    ext_len = np.zeros(b, dtype=np.int64)
    for i, y in enumerate(targets):
        ext[i, 1:2 * len(y):2] = y
        ext_len[i] = 2 * len(y) + 1
        for s in range(3, 2 * len(y), 2):
            skip[i, s] = ext[i, s] != ext[i, s - 2]
    return ext, skip, ext_len


def ctc_batch(log_probs: np.ndarray, targets: Sequence[Sequence[int]], lengths=None,
              blank: int = BLANK) -> tuple:
    """Per-utterance losses (B,) and gradients (B, T, V) w.r.t. ``log_probs``.

    The gradient is minus the expected occupancy of each symbol at each frame;
    composed with a log-softmax it becomes softmax minus occupancy.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    b, t_max, v = lp.shape
    lengths = np.full(b, t_max) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > t_max):
        raise ValueError(f"input lengths must lie in [1, {t_max}]")
    targets = [list(map(int, y)) for y in targets]
    for y in targets:
        if y and (min(y) < 0 or max(y) >= v or blank in y):
            raise ValueError("targets must be non-blank ids inside the vocabulary")
    ext, skip, ext_len = _extend(targets, blank)
    alpha, beta, logz, _ = _ctc_tables(lp, ext, skip, lengths, ext_len)
    reachable = np.isfinite(logz)
    with np.errstate(invalid="ignore"):
        post = np.exp(alpha + beta - np.where(reachable, logz, 0.0)[:, None, None])
    post = np.where(reachable[:, None, None] & np.isfinite(post), post, 0.0)
    onehot = np.zeros((b, ext.shape[1], v))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
    valid_s = np.arange(ext.shape[1])[None, :] < ext_len[:, None]
    onehot *= valid_s[:, :, None]
    grad = -(post @ onehot)
    grad *= (np.arange(t_max)[None, :] < lengths[:, None])[:, :, None]
    return -logz, grad, alpha, beta


def ctc_loss(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> LatticeResult:
    """Negative log of the summed probability of every alignment collapsing to ``target``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError(f"expected a (T, V) log-probability matrix, got {lp.shape}")
    loss, grad, alpha, beta = ctc_batch(lp[None], [target], blank=blank)
    reachable = bool(np.isfinite(loss[0]))
    return LatticeResult(float(loss[0]), grad[0], alpha[0], beta[0], reachable)


@lru_cache(maxsize=64)
def _all_paths(num_frames: int, vocab: int, blank: int):
    paths = np.array(list(itertools.product(range(vocab), repeat=num_frames)), dtype=np.int64)
    labels = [tuple(collapse(p, blank)) for p in paths]
    return paths, labels


def ctc_loss_oracle(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK,
                    max_paths: int = 10 ** 7) -> float:
    """Brute force: sum prod_t C[t, Z[t]] over every path Z with collapse(Z) == target."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, v = lp.shape
    if v ** t > max_paths:
        raise ValueError(f"{v}^{t} paths exceed the enumeration limit {max_paths}")
    paths, labels = _all_paths(t, v, blank)
    want = tuple(int(y) for y in target)
    keep = np.array([lab == want for lab in labels])
    if not keep.any():
        return float("inf")
    scores = lp[np.arange(t)[None, :], paths[keep]].sum(axis=1)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


# ---------------------------------------------------------------------------
# transducer
# ---------------------------------------------------------------------------


def transducer_batch(log_probs: np.ndarray, targets: Sequence[Sequence[int]], lengths=None,
                     blank: int = BLANK) -> tuple:
    """Per-utterance transducer losses and gradients w.r.t. ``log_probs`` (B, T, U+1, V).

    alpha(t, u) is the log-probability of reaching lattice node (t, u); beta(t, u)
    the log-probability of finishing from it, including its own move, so that
    beta(0, 0) is the total log-likelihood and alpha + beta is constant along
    every anti-diagonal t + u = n.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    b, t_max, u1, v = lp.shape
    lengths = np.full(b, t_max) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > t_max):
        raise ValueError(f"input lengths must lie in [1, {t_max}]")
    ulen = np.array([len(y) for y in targets], dtype=np.int64)
    if np.any(ulen + 1 > u1):
        raise ValueError(f"target longer than the lattice's {u1 - 1} label positions")
    labels = np.zeros((b, u1), dtype=np.int64)
    for i, y in enumerate(targets):
        y = list(map(int, y))
        if y and (min(y) < 0 or max(y) >= v or blank in y):
            raise ValueError("targets must be non-blank ids inside the vocabulary")
        labels[i, :len(y)] = y
    lpb = lp[..., blank]
    lpy = np.take_along_axis(lp, np.broadcast_to(labels[:, None, :, None], (b, t_max, u1, 1)), axis=3)[..., 0]
    lpy = np.where(np.arange(u1)[None, None, :] < ulen[:, None, None], lpy, NEG_INF)

    alpha = np.full((b, t_max, u1), NEG_INF)
    for t in range(t_max):
        for u in range(u1):
            if t == 0 and u == 0:
                alpha[:, 0, 0] = 0.0
                continue
            from_t = alpha[:, t - 1, u] + lpb[:, t - 1, u] if t > 0 else NEG_INF
            from_u = alpha[:, t, u - 1] + lpy[:, t, u - 1] if u > 0 else NEG_INF
            alpha[:, t, u] = np.logaddexp(from_t, from_u)

    rows = np.arange(b)
    beta = np.full((b, t_max, u1), NEG_INF)
    boundary = np.where(np.arange(u1)[None, :] == ulen[:, None], 0.0, NEG_INF)
    nxt = np.full((b, u1), NEG_INF)
    for t in range(t_max - 1, -1, -1):
        nxt = np.where((lengths - 1 == t)[:, None], boundary, nxt)
        row = np.full((b, u1), NEG_INF)
        for u in range(u1 - 1, -1, -1):
            blank_move = nxt[:, u] + lpb[:, t, u]
            label_move = row[:, u + 1] + lpy[:, t, u] if u + 1 < u1 else NEG_INF
            row[:, u] = np.logaddexp(blank_move, label_move)
        row = np.where((t < lengths)[:, None], row, NEG_INF)
        beta[:, t] = row
        nxt = row

    logz = beta[:, 0, 0]
    loss = -logz
    # gradient w.r.t. log-probs: minus the posterior of using each move
    beta_next_t = np.concatenate([beta[:, 1:], np.full((b, 1, u1), NEG_INF)], axis=1)
    at_end = (np.arange(t_max)[None, :] == (lengths - 1)[:, None])[:, :, None] & \
             (np.arange(u1)[None, None, :] == ulen[:, None, None])
    beta_next_t = np.where(at_end, 0.0, beta_next_t)
    beta_next_u = np.concatenate([beta[:, :, 1:], np.full((b, t_max, 1), NEG_INF)], axis=2)
    z = np.where(np.isfinite(logz), logz, 0.0)[:, None, None]
    with np.errstate(invalid="ignore"):
        g_blank = -np.exp(alpha + lpb + beta_next_t - z)
        g_label = -np.exp(alpha + lpy + beta_next_u - z)
    g_blank = np.nan_to_num(g_blank, nan=0.0)
    g_label = np.nan_to_num(g_label, nan=0.0)
    onehot = np.zeros((b, 1, u1, v))
    np.put_along_axis(onehot, labels[:, None, :, None], 1.0, axis=3)
    grad = g_label[..., None] * onehot
    grad[..., blank] += g_blank
    grad[~np.isfinite(logz)] = 0.0
    return loss, grad, alpha, beta


def transducer_loss(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> LatticeResult:
    """Loss over the (T, U+1) lattice for one utterance; ``log_probs`` is (T, U+1, V)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 3 or lp.shape[1] != len(target) + 1:
        raise ValueError(f"expected (T, {len(target) + 1}, V) log-probs, got {lp.shape}")
    loss, grad, alpha, beta = transducer_batch(lp[None], [target], blank=blank)
    return LatticeResult(float(loss[0]), grad[0], alpha[0], beta[0], bool(np.isfinite(loss[0])))


def transducer_loss_oracle(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK,
                           max_paths: int = 10 ** 6) -> float:
    """Brute force over every monotone move sequence emitting ``target``.

    A move sequence interleaves T blanks (each advancing time) with the U
    labels (each advancing the target position) and must end on a blank.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len = lp.shape[0]
    u_len = len(target)
    n_moves = t_len - 1 + u_len
    count = 1
    for i in range(u_len):
        count = count * (n_moves - i) // (i + 1)
    if count > max_paths:
        raise ValueError(f"{count} alignments exceed the enumeration limit {max_paths}")
    scores = []
    for label_slots in itertools.combinations(range(n_moves), u_len):
        slots = set(label_slots)
        t = u = 0
        s = 0.0
        for m in range(n_moves):
            if m in slots:
                s += lp[t, u, target[u]]
                u += 1
            else:
                s += lp[t, u, blank]
                t += 1
        s += lp[t_len - 1, u_len, blank]
        scores.append(s)
    scores = np.array(scores)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


# ---------------------------------------------------------------------------
# autodiff wrappers
# ---------------------------------------------------------------------------


def batch_ctc_loss(log_probs: T.Tensor, targets, lengths, blank: int = BLANK) -> T.Tensor:
    """(B,) per-utterance CTC losses as a graph node over (B, T, V) log-probs."""
    loss, grad, _, _ = ctc_batch(log_probs.data, targets, lengths, blank)
    return T.custom(loss, [log_probs], [lambda g: g[:, None, None] * grad], "ctc_loss")


def batch_transducer_loss(log_probs: T.Tensor, targets, lengths, blank: int = BLANK) -> T.Tensor:
    """(B,) per-utterance transducer losses over (B, T, U+1, V) log-probs."""
    loss, grad, _, _ = transducer_batch(log_probs.data, targets, lengths, blank)
    return T.custom(loss, [log_probs], [lambda g: g[:, None, None, None] * grad], "transducer_loss")


def attention_loss(step_log_probs, targets_with_eos: Sequence[Sequence[int]]) -> T.Tensor:
    """(B,) teacher-forced cross-entropy: sum over steps of -log p(y[t] | y[<t]).

    ``step_log_probs`` is (B, L, V) with L >= the longest target; steps beyond a
    target's length are ignored.
    """
    step_log_probs = T.as_tensor(step_log_probs)
    b, l_max, v = step_log_probs.shape
    if len(targets_with_eos) != b:
        raise ValueError(f"{len(targets_with_eos)} targets for a batch of {b}")
    lens = [len(y) for y in targets_with_eos]
    if max(lens, default=0) > l_max:
        raise ValueError(f"target of length {max(lens)} but only {l_max} decoder steps")
    ids = np.zeros((b, l_max), dtype=np.int64)
    weight = np.zeros((b, l_max))
    for i, y in enumerate(targets_with_eos):
        ids[i, :len(y)] = y
        weight[i, :len(y)] = 1.0
    picked = step_log_probs[np.arange(b)[:, None], np.arange(l_max)[None, :], ids]
    return -(picked * weight).sum(axis=1)


def masked_mean(losses: T.Tensor, valid: Optional[np.ndarray] = None) -> T.Tensor:
    """Mean over utterances, skipping entries flagged invalid (e.g. unreachable)."""
    if valid is None:
        return losses.mean()
    n = max(int(valid.sum()), 1)
    return (T.masked_fill(losses, ~valid, 0.0)).sum() * (1.0 / n)
