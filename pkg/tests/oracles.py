"""Independent reference implementations used to freeze expected values.

None of these share code with the package: they enumerate alignments,
sequences or edit scripts directly, trading speed for obviousness.
"""

from __future__ import annotations

import functools
import itertools
import math

import numpy as np


def collapse_ref(path, blank=0):
    out = []
    for i, s in enumerate(path):
        if s == blank:
            continue
        if i > 0 and path[i - 1] == s:
            continue
        out.append(s)
    return tuple(out)


def ctc_nll_bruteforce(log_probs: np.ndarray, target, blank: int = 0) -> float:
    """-log of the summed probability of every alignment that collapses to ``target``."""
    T, V = log_probs.shape
    target = tuple(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse_ref(path, blank) == target:
            total += math.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
    return math.inf if total == 0.0 else -math.log(total)


def collapsed_distribution(log_probs: np.ndarray, blank: int = 0, exclude=(1,)) -> dict:
    """Probability of every collapsed sequence, enumerating alignments over non-excluded symbols."""
    T, V = log_probs.shape
    symbols = [s for s in range(V) if s not in exclude]
    dist: dict[tuple, float] = {}
    for path in itertools.product(symbols, repeat=T):
        key = collapse_ref(path, blank)
        dist[key] = dist.get(key, 0.0) + math.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
    return dist


def exhaustive_best(log_probs: np.ndarray, blank: int = 0, exclude=(1,)) -> tuple:
    dist = collapsed_distribution(log_probs, blank, exclude)
    return min(dist, key=lambda seq: (-dist[seq], seq))


def levenshtein_ref(a, b) -> int:
    """Textbook recursive definition, memoised."""
    a, b = tuple(a), tuple(b)

    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def random_log_probs(rng: np.random.Generator, T: int, V: int, sharpness: float = 2.0) -> np.ndarray:
    logits = sharpness * rng.standard_normal((T, V))
    logits -= logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g
