"""Synthetic confusable-token corpus, its binary file format, and batching.

Each real token owns a unit-norm emission mean; a confusable pair (a, b, kappa)
pulls both means toward their midpoint so that kappa=0 makes them identical
and kappa=1 leaves them untouched.  An utterance is a token string (no
adjacent repeats) where every token emits a run of Gaussian frames.

File layout (little endian)::

    b"SANDS1" u32 count
    per utterance: u32 T, u32 d, u32 L, f32 features[T*d], u32 tokens[L],
                   u16 id_len, utf-8 id
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .autodiff import make_rng
from .vocab import SENTINEL

MAGIC = b"SANDS1"
N_RESERVED = 2


@dataclass
class SynthConfig:
    n_tokens: int = 12
    feature_dim: int = 16
    frames_per_token: tuple[int, int] = (3, 5)
    confusable_pairs: list[tuple[int, int, float]] = field(
        default_factory=lambda: [(0, 1, 0.25), (2, 3, 0.25), (4, 5, 0.25), (6, 7, 0.25)])
    noise_sigma: float = 0.5
    utterance_len: tuple[int, int] = (3, 7)
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 400
    seed: int = 0

    def __post_init__(self):
        self.frames_per_token = tuple(int(v) for v in self.frames_per_token)
        self.utterance_len = tuple(int(v) for v in self.utterance_len)
        self.confusable_pairs = [(int(a), int(b), float(k)) for a, b, k in self.confusable_pairs]
        self.validate()

    @property
    def vocab_size(self) -> int:
        return self.n_tokens + N_RESERVED

    def validate(self) -> None:
        if self.n_tokens < 2:
            raise ConfigError("synth.n_tokens must be at least 2")
        if self.feature_dim < 1:
            raise ConfigError("synth.feature_dim must be positive")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise ConfigError(f"synth.frames_per_token must satisfy 1 <= min <= max, got {self.frames_per_token}")
        ulo, uhi = self.utterance_len
        if not 1 <= ulo <= uhi:
            raise ConfigError(f"synth.utterance_len must satisfy 1 <= min <= max, got {self.utterance_len}")
        if lo < 3:
            raise ConfigError("synth.frames_per_token min must be >= 3 so every utterance has T >= 2L+1")
        if self.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma must be non-negative")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ConfigError("synth split sizes must be non-negative")
        seen: set[int] = set()
        for a, b, kappa in self.confusable_pairs:
            if a == b or not (0 <= a < self.n_tokens and 0 <= b < self.n_tokens):
                raise ConfigError(f"synth.confusable_pairs: bad pair ({a}, {b})")
            if not 0.0 <= kappa <= 1.0:
                raise ConfigError(f"synth.confusable_pairs: overlap {kappa} outside [0, 1]")
            if a in seen or b in seen:
                raise ConfigError(f"synth.confusable_pairs: token in ({a}, {b}) already paired")
            seen.update((a, b))


@dataclass
class FeatureSequence:
    features: np.ndarray            # (T, d) float32
    tokens: tuple[int, ...]         # vocabulary ids, each >= 2
    utterance_id: str

    def __eq__(self, other):
        return (isinstance(other, FeatureSequence) and self.utterance_id == other.utterance_id
                and self.tokens == other.tokens and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


def emission_means(cfg: SynthConfig) -> np.ndarray:
    """(n_tokens, d) emission means after confusable-pair interpolation."""
    rng = make_rng([cfg.seed, 0])
    g = rng.standard_normal((cfg.feature_dim, cfg.n_tokens))
    if cfg.feature_dim >= cfg.n_tokens:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
    else:
        q = g
    means = (q / np.linalg.norm(q, axis=0, keepdims=True)).T.copy()
    for a, b, kappa in cfg.confusable_pairs:
        mid, half = 0.5 * (means[a] + means[b]), 0.5 * (means[a] - means[b])
        means[a] = mid + kappa * half
        means[b] = mid - kappa * half
    return means


def _sample_split(cfg: SynthConfig, means: np.ndarray, name: str, n: int, stream: int) -> list[FeatureSequence]:
    rng = make_rng([cfg.seed, stream])
    out = []
    lo, hi = cfg.frames_per_token
    for i in range(n):
        L = int(rng.integers(cfg.utterance_len[0], cfg.utterance_len[1] + 1))
        toks = [int(rng.integers(cfg.n_tokens))]
        while len(toks) < L:
            nxt = int(rng.integers(cfg.n_tokens - 1))
            toks.append(nxt + (nxt >= toks[-1]))
        frames = []
        for tok in toks:
            k = int(rng.integers(lo, hi + 1))
            frames.append(means[tok] + cfg.noise_sigma * rng.standard_normal((k, cfg.feature_dim)))
        feats = np.concatenate(frames).astype(np.float32)
        out.append(FeatureSequence(feats, tuple(t + N_RESERVED for t in toks), f"{name}-{i:06d}"))
    return out


def generate_dataset(cfg: SynthConfig) -> dict[str, list[FeatureSequence]]:
    cfg.validate()
    means = emission_means(cfg)
    return {
        "train": _sample_split(cfg, means, "train", cfg.n_train, 1),
        "dev": _sample_split(cfg, means, "dev", cfg.n_dev, 2),
        "test": _sample_split(cfg, means, "test", cfg.n_test, 3),
    }


# ---- file format -------------------------------------------------------------

def encode_dataset(utterances: Sequence[FeatureSequence]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(utterances))]
    for utt in utterances:
        T, d = utt.features.shape
        uid = utt.utterance_id.encode("utf-8")
        parts.append(struct.pack("<III", T, d, len(utt.tokens)))
        parts.append(np.ascontiguousarray(utt.features, dtype="<f4").tobytes())
        parts.append(np.asarray(utt.tokens, dtype="<u4").tobytes())
        parts.append(struct.pack("<H", len(uid)))
        parts.append(uid)
    return b"".join(parts)


def write_dataset(utterances: Sequence[FeatureSequence], path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(utterances))


def decode_dataset(buf: bytes, vocab_size: int | None = None, feature_dim: int | None = None) -> list[FeatureSequence]:
    """Parse a dataset file, validating structure and content.

    Raises :class:`FormatError` naming the byte offset and record index of
    the first problem found.
    """
    pos = 0

    def take(n: int, what: str, rec: int | None) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            where = "header" if rec is None else f"record {rec}"
            raise FormatError(f"truncated {what} in {where} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(6, "magic", None) != MAGIC:
        raise FormatError("bad magic at byte 0")
    (count,) = struct.unpack("<I", take(4, "count", None))
    out: list[FeatureSequence] = []
    seen: set[str] = set()
    for rec in range(count):
        start = pos
        T, d, L = struct.unpack("<III", take(12, "shape", rec))
        if T == 0:
            raise FormatError(f"record {rec} at byte {start}: zero frames")
        dim = feature_dim if feature_dim is not None else (out[0].features.shape[1] if out else d)
        if d != dim:
            raise FormatError(f"record {rec} at byte {start}: feature dim {d} != {dim}")
        feats = np.frombuffer(take(4 * T * d, "features", rec), dtype="<f4").reshape(T, d).astype(np.float32)
        if not np.all(np.isfinite(feats)):
            raise FormatError(f"record {rec} at byte {start}: non-finite feature value")
        toks = np.frombuffer(take(4 * L, "tokens", rec), dtype="<u4")
        if L and toks.min() <= SENTINEL:
            raise FormatError(f"record {rec} at byte {start}: reserved token id in target")
        if vocab_size is not None and L and toks.max() >= vocab_size:
            raise FormatError(f"record {rec} at byte {start}: token id {int(toks.max())} >= vocab size {vocab_size}")
        (n_id,) = struct.unpack("<H", take(2, "id length", rec))
        try:
            uid = take(n_id, "id", rec).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"record {rec} at byte {start}: utterance id is not valid UTF-8") from None
        if uid in seen:
            raise FormatError(f"record {rec} at byte {start}: duplicate utterance id {uid!r}")
        seen.add(uid)
        out.append(FeatureSequence(feats, tuple(int(t) for t in toks), uid))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after record {count - 1} at byte {pos}")
    return out


def read_dataset(path: str | Path, vocab_size: int | None = None, feature_dim: int | None = None) -> list[FeatureSequence]:
    try:
        return decode_dataset(Path(path).read_bytes(), vocab_size, feature_dim)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---- batching ----------------------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray        # (B, T, d), zero padded
    frame_mask: np.ndarray      # (B, T) bool
    targets: np.ndarray         # (B, L) int, PAD beyond each target
    target_mask: np.ndarray     # (B, L) bool
    utterances: list[FeatureSequence]

    PAD = -1

    @property
    def lengths(self) -> np.ndarray:
        return self.frame_mask.sum(axis=1)

    @property
    def token_lists(self) -> list[tuple[int, ...]]:
        return [u.tokens for u in self.utterances]

    def __len__(self) -> int:
        return len(self.utterances)


def make_batch(utterances: Sequence[FeatureSequence]) -> Batch:
    utterances = list(utterances)
    B = len(utterances)
    T = max(u.features.shape[0] for u in utterances)
    d = utterances[0].features.shape[1]
    L = max(len(u.tokens) for u in utterances)
    feats = np.zeros((B, T, d))
    fmask = np.zeros((B, T), dtype=bool)
    tgts = np.full((B, L), Batch.PAD, dtype=np.int64)
    tmask = np.zeros((B, L), dtype=bool)
    for b, u in enumerate(utterances):
        n = u.features.shape[0]
        feats[b, :n] = u.features
        fmask[b, :n] = True
        tgts[b, :len(u.tokens)] = u.tokens
        tmask[b, :len(u.tokens)] = True
    return Batch(feats, fmask, tgts, tmask, utterances)


def batch_iter(utterances: Sequence[FeatureSequence], batch_size: int, shuffle_seed: int | None,
               epoch: int) -> Iterator[Batch]:
    """Padded batches covering every utterance once; order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(utterances)
    order = np.arange(n) if shuffle_seed is None else make_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield make_batch([utterances[i] for i in order[start:start + batch_size]])
