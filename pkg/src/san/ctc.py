"""CTC loss (exact forward-backward in log space) and CTC decoders.

Token id conventions follow :mod:`san.vocab`: id 0 is the CTC blank and
id 1 is the attention sentinel, which never appears in a CTC alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, custom_op, grad_enabled
from .vocab import BLANK, SENTINEL

NEG_INF = -math.inf


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    log_score: float
    terminated: bool = True


class NBest(list):
    """A best-first hypothesis list; ``truncated`` is set when fewer than
    the requested number of prefixes survived."""

    truncated: bool = False


def augment(target: Sequence[int], blank: int = BLANK) -> list[int]:
    """Interleave blanks: ``(blank, y1, blank, y2, ..., blank)``."""
    out = [blank]
    for tok in target:
        out.extend((tok, blank))
    return out


def min_frames(target: Sequence[int]) -> int:
    """Shortest alignment length: one frame per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(n_frames: int, target: Sequence[int]) -> bool:
    return n_frames >= min_frames(target)


def _ctc_forward_backward(lp: np.ndarray, lengths: np.ndarray, targets: Sequence[Sequence[int]],
                          blank: int, need_grad: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Negative log-likelihoods (B,) and their gradients w.r.t. ``lp`` (B,T,V)."""
    B, T, V = lp.shape
    L = max((len(t) for t in targets), default=0)
    S = 2 * L + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    lp_ext = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    neg = np.array(NEG_INF, dtype=lp.dtype)

    alpha = np.full((B, T, S), neg, dtype=lp.dtype)
    alpha[:, 0, 0] = lp_ext[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = lp_ext[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        acc[:, 2:] = np.logaddexp(acc[:, 2:], np.where(skip[:, 2:], prev[:, :-2], neg))
        alpha[:, t] = acc + lp_ext[:, t]

    ends = np.array([2 * len(t) for t in targets], dtype=np.int64)
    last = lengths - 1
    rows = np.arange(B)
    has_tok = ends > 0
    final = alpha[rows, last, ends]
    final = np.where(has_tok, np.logaddexp(final, alpha[rows, last, np.maximum(ends - 1, 0)]), final)
    nll = -final
    if not need_grad:
        return nll, None

    beta = np.full((B, T, S), neg, dtype=lp.dtype)
    init = np.full((B, S), neg, dtype=lp.dtype)
    init[rows, ends] = 0.0
    init[rows[has_tok], ends[has_tok] - 1] = 0.0
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            rec = np.full((B, S), neg, dtype=lp.dtype)
        else:
            nxt = beta[:, t + 1] + lp_ext[:, t + 1]
            rec = nxt.copy()
            rec[:, :-1] = np.logaddexp(rec[:, :-1], nxt[:, 1:])
            rec[:, :-2] = np.logaddexp(rec[:, :-2], np.where(skip[:, 2:], nxt[:, 2:], neg))
        beta[:, t] = np.where((t == last)[:, None], init, np.where((t < last)[:, None], rec, neg))

    grad = np.zeros_like(lp)
    feasible = np.isfinite(final)
    if feasible.any():
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - final[:, None, None])
        occ[~feasible] = 0.0
        occ = np.nan_to_num(occ, nan=0.0)
        grid_b = np.arange(B)[:, None, None]
        grid_t = np.arange(T)[None, :, None]
        np.add.at(grad, (grid_b, grid_t, ext[:, None, :]), -occ)
        grad[np.arange(T)[None, :] >= lengths[:, None]] = 0.0
    return nll, grad


def ctc_loss(log_probs: Tensor, targets, input_lengths=None, blank: int = BLANK) -> Tensor:
    """Exact CTC negative log-likelihood.

    ``log_probs`` is ``(T, V)`` with a single target sequence, or ``(B, T, V)``
    with a list of targets and optional per-utterance frame counts.  The
    result is a scalar or a ``(B,)`` tensor; an infeasible target yields
    ``+inf`` with zero gradient rather than raising.
    """
    single = log_probs.ndim == 2
    lp = log_probs.data[None] if single else log_probs.data
    if single:
        targets = [targets]
    targets = [list(map(int, t)) for t in targets]
    B, T, V = lp.shape
    if len(targets) != B:
        raise ValueError(f"got {len(targets)} targets for a batch of {B}")
    for tgt in targets:
        if any(tok == blank or tok < 0 or tok >= V for tok in tgt):
            raise ValueError(f"target {tgt} contains blank or out-of-range ids for V={V}")
    lengths = np.full(B, T, dtype=np.int64) if input_lengths is None else np.asarray(input_lengths, dtype=np.int64)
    if np.any(lengths < 1) or np.any(lengths > T):
        raise ValueError("input lengths must lie in [1, T]")
    nll, grad = _ctc_forward_backward(lp, lengths, targets, blank,
                                      need_grad=grad_enabled() and log_probs.requires_grad)

    def backward(g):
        g = np.asarray(g)
        g = np.where(np.isfinite(nll), g, 0.0) if g.ndim else (g if np.isfinite(nll[0]) else 0.0)
        full = grad * (g[:, None, None] if np.ndim(g) else g)
        return (full[0] if single else full,)

    out = nll[0] if single else nll
    return custom_op(np.asarray(out), (log_probs,), backward, "ctc_loss")


def collapse(alignment: Sequence[int], blank: int = BLANK) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for tok in alignment:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return tuple(out)


def _allowed_mask(V: int, ignore: Sequence[int]) -> np.ndarray:
    allowed = np.ones(V, dtype=bool)
    for tok in ignore:
        if tok < V:
            allowed[tok] = False
    return allowed


def greedy_decode(log_probs, blank: int = BLANK, ignore: Sequence[int] = (SENTINEL,)) -> Hypothesis:
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    masked = np.where(_allowed_mask(lp.shape[1], ignore), lp, -np.inf)
    best = masked.argmax(axis=1)
    score = float(masked[np.arange(len(best)), best].sum())
    return Hypothesis(collapse(best, blank), score)


def _logadd(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def prefix_beam_decode(log_probs, beam_width: int, k: int, blank: int = BLANK,
                       ignore: Sequence[int] = (SENTINEL,)) -> NBest:
    """CTC prefix beam search returning up to ``k`` prefixes, best first.

    Each prefix carries separate log masses for alignments ending in blank
    and in its last token.  Ranking ties fall back to lexicographic order
    of the prefix, so the output is a pure function of the input.
    """
    if not beam_width >= k >= 1:
        raise ValueError(f"need beam_width >= k >= 1, got beam_width={beam_width}, k={k}")
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    symbols = [int(c) for c in np.flatnonzero(_allowed_mask(lp.shape[1], ignore)) if c != blank]
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for row in lp.tolist():
        nxt: dict[tuple[int, ...], list[float]] = {}
        p_blank = row[blank]
        for prefix, (pb, pnb) in beams.items():
            total = _logadd(pb, pnb)
            cell = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            cell[0] = _logadd(cell[0], total + p_blank)
            last = prefix[-1] if prefix else None
            for c in symbols:
                p = row[c]
                ext = nxt.setdefault(prefix + (c,), [NEG_INF, NEG_INF])
                if c == last:
                    cell[1] = _logadd(cell[1], pnb + p)
                    ext[1] = _logadd(ext[1], pb + p)
                else:
                    ext[1] = _logadd(ext[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-_logadd(*kv[1]), kv[0]))
        beams = {prefix: (m[0], m[1]) for prefix, m in ranked[:beam_width]
                 if _logadd(m[0], m[1]) > NEG_INF}
    ranked = sorted(((p, _logadd(*m)) for p, m in beams.items()), key=lambda pm: (-pm[1], pm[0]))
    out = NBest(Hypothesis(p, s) for p, s in ranked[:k])
    out.truncated = len(out) < k
    return out
