"""Token error rate and the four-mode decoding harness."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .ctc import greedy_decode, prefix_beam_decode
from .data import FeatureSequence, make_batch
from .model import ModelConfig, attention_decode, ctc_head, encode, rescore, to_tensors

MODES = ("greedy", "ctc_prefix", "attention", "attention_rescore")


@dataclass(frozen=True)
class EditOps:
    distance: int
    sub: int
    ins: int
    dele: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditOps:
    """Unit-cost Levenshtein distance with a substitution/deletion/insertion breakdown.

    On ties the backtrace prefers the diagonal (match or substitution), then
    deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dp[i, j] = min(dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                           dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    i, j = n, m
    sub = ins = dele = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditOps(int(dp[n, m]), int(sub), ins, dele)


def error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise ValueError("error rate is undefined for zero reference tokens")
    return sum(edit_distance(r, h).distance for r, h in zip(refs, hyps)) / n_ref


@dataclass
class ModeResult:
    err: float
    sub: int
    ins: int
    dele: int
    n_ref: int
    seconds: float = 0.0

    def as_json(self) -> dict:
        return {"err": self.err, "sub": self.sub, "ins": self.ins, "del": self.dele,
                "n_ref": self.n_ref, "seconds": self.seconds}


@dataclass
class EvalReport:
    modes: dict[str, ModeResult]
    hypotheses: dict[str, list[tuple[int, ...]]] = field(default_factory=dict, repr=False)

    def to_json(self, checkpoint: str = "", dataset: str = "", timing: bool = True) -> str:
        modes = {k: v.as_json() for k, v in self.modes.items()}
        if not timing:
            for entry in modes.values():
                entry.pop("seconds")
        doc = {"modes": modes,
               "checkpoint": checkpoint, "dataset": dataset}
        return json.dumps(doc, indent=2, sort_keys=False)


def _score(refs, hyps, seconds: float) -> ModeResult:
    sub = ins = dele = dist = 0
    for r, h in zip(refs, hyps):
        ops = edit_distance(r, h)
        dist += ops.distance
        sub += ops.sub
        ins += ops.ins
        dele += ops.dele
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise ValueError("dataset has no reference tokens")
    return ModeResult(dist / n_ref, sub, ins, dele, n_ref, seconds)


def evaluate(params, cfg: ModelConfig, dataset: Sequence[FeatureSequence], modes: Sequence[str] = MODES,
             beam: int = 4, k: int = 4, timing: bool = True, batch_size: int = 64) -> EvalReport:
    """Decode ``dataset`` with dropout disabled in each requested mode.

    ``beam`` is the beam width for both the CTC prefix search and attention
    beam search; ``attention_rescore`` rescored the top ``k`` CTC prefixes.
    """
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise ValueError(f"unknown decode mode(s) {unknown}; choose from {MODES}")
    if beam < k:
        raise ValueError(f"beam ({beam}) must be >= k ({k})")
    tensors = params if all(isinstance(v, ad.Tensor) for v in params.values()) else to_tensors(params)
    hyps: dict[str, list] = {m: [] for m in modes}
    seconds = dict.fromkeys(modes, 0.0)
    clock = time.perf_counter if timing else (lambda: 0.0)
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = make_batch(dataset[start:start + batch_size])
            enc = encode(batch.features, cfg, tensors, lengths=batch.lengths)
            ctc_lp = ctc_head(enc, tensors).data
            for b in range(len(batch)):
                n = int(enc.lengths[b])
                lp = ctc_lp[b, :n]
                single = enc.select(b)
                nbest = None
                for mode in modes:
                    t0 = clock()
                    if mode == "greedy":
                        hyp = greedy_decode(lp)
                    elif mode == "ctc_prefix":
                        nbest = nbest or prefix_beam_decode(lp, beam, k)
                        hyp = nbest[0]
                    elif mode == "attention":
                        hyp = attention_decode(single, cfg, tensors, beam)
                    else:
                        nbest = nbest or prefix_beam_decode(lp, beam, k)
                        hyp = rescore(nbest, single, cfg, tensors)
                    seconds[mode] += clock() - t0
                    hyps[mode].append(hyp.tokens)
    refs = [u.tokens for u in dataset]
    results = {m: _score(refs, hyps[m], seconds[m]) for m in modes}
    return EvalReport(results, hyps)
