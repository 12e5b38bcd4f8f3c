"""Hybrid CTC/attention encoder-decoder built on :mod:`san.autodiff`.

Parameters live in a flat ``{name: Tensor}`` dict; every function here is a
pure function of its inputs, the parameter dict and (when training) a
dropout generator.  Batched inputs are ``(B, T, d)`` with per-utterance
frame counts; a ``(T, d)`` input is treated as a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .ctc import Hypothesis
from .vocab import BLANK, SENTINEL

MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    feature_dim: int = 8
    model_dim: int = 16
    vocab_size: int | None = 6
    encoder_kind: str = "self_attention"
    encoder_layers: int = 2
    decoder_layers: int = 1
    attention_heads: int = 2
    dropout_p: float = 0.1
    subsample: int = 1

    def __post_init__(self):
        for name in ("feature_dim", "model_dim", "encoder_layers", "decoder_layers", "attention_heads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"model.{name} must be a positive integer")
        if self.encoder_kind not in ("self_attention", "recurrent"):
            raise ValueError(f"model.encoder_kind must be 'self_attention' or 'recurrent', got {self.encoder_kind!r}")
        # the decoder is self-attention for both encoder kinds
        if self.model_dim % self.attention_heads:
            raise ValueError("model.model_dim must be divisible by model.attention_heads")
        if self.vocab_size is not None and self.vocab_size < 3:
            raise ValueError("model.vocab_size must be at least 3 (blank, sentinel, one token)")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("model.dropout_p must lie in [0, 1)")
        if self.subsample not in (1, 2):
            raise ValueError("model.subsample must be 1 or 2")

    @property
    def ffn_dim(self) -> int:
        return 2 * self.model_dim


@dataclass
class Encoding:
    hidden: Tensor          # (B, T', model_dim)
    lengths: np.ndarray     # (B,) valid frames per utterance

    @property
    def frame_count(self) -> int:
        return int(self.hidden.shape[1])

    def select(self, b: int) -> "Encoding":
        n = int(self.lengths[b])
        return Encoding(Tensor(self.hidden.data[b:b + 1, :n]), np.array([n]))


# ---- parameters -------------------------------------------------------------

def _attn_shapes(prefix: str, D: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for p in ("q", "k", "v", "o"):
        out[f"{prefix}.w{p}"] = (D, D)
        out[f"{prefix}.b{p}"] = (D,)
    return out


def _ln_shapes(prefix: str, D: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (D,), f"{prefix}.b": (D,)}


def _ffn_shapes(prefix: str, D: int, F: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (D, F), f"{prefix}.b1": (F,), f"{prefix}.w2": (F, D), f"{prefix}.b2": (D,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if cfg.vocab_size is None:
        raise ValueError("model.vocab_size is unresolved")
    D, F, V = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "enc.in.w": (cfg.feature_dim * cfg.subsample, D),
        "enc.in.b": (D,),
    }
    for i in range(cfg.encoder_layers):
        p = f"enc.{i}"
        if cfg.encoder_kind == "self_attention":
            shapes.update(_ln_shapes(f"{p}.ln1", D))
            shapes.update(_attn_shapes(f"{p}.att", D))
            shapes.update(_ln_shapes(f"{p}.ln2", D))
            shapes.update(_ffn_shapes(f"{p}.ffn", D, F))
        else:
            shapes[f"{p}.lstm.wx"] = (D, 4 * D)
            shapes[f"{p}.lstm.wh"] = (D, 4 * D)
            shapes[f"{p}.lstm.b"] = (4 * D,)
    shapes.update(_ln_shapes("enc.ln", D))
    shapes["ctc.w"] = (D, V)
    shapes["ctc.b"] = (V,)
    shapes["dec.emb"] = (V, D)
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", D))
        shapes.update(_attn_shapes(f"{p}.self", D))
        shapes.update(_ln_shapes(f"{p}.ln2", D))
        shapes.update(_attn_shapes(f"{p}.cross", D))
        shapes.update(_ln_shapes(f"{p}.ln3", D))
        shapes.update(_ffn_shapes(f"{p}.ffn", D, F))
    shapes.update(_ln_shapes("dec.ln", D))
    shapes["dec.out.w"] = (D, V)
    shapes["dec.out.b"] = (V,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    params = {}
    for name, shape in sorted(param_shapes(cfg).items()):
        if len(shape) == 2:
            params[name] = ad.glorot_uniform(rng, *shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def to_tensors(arrays: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}


# ---- building blocks ----------------------------------------------------------

_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(n: int, D: int) -> np.ndarray:
    key = (n, D)
    if key not in _POS_CACHE:
        pos = np.arange(n)[:, None]
        rate = np.exp(-math.log(10000.0) * (np.arange(0, D, 2) / D))
        pe = np.zeros((n, D))
        pe[:, 0::2] = np.sin(pos * rate)
        pe[:, 1::2] = np.cos(pos * rate)[:, : D // 2]
        _POS_CACHE[key] = pe
    return _POS_CACHE[key]


def _layer_norm(x: Tensor, params, prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _attention(params, prefix: str, q_in: Tensor, kv_in: Tensor, mask: np.ndarray, heads: int) -> Tensor:
    Bq, Tq, D = q_in.shape
    Bk, Tk, _ = kv_in.shape
    dh = D // heads

    def project(x, name, B, T):
        y = ad.linear(x, params[f"{prefix}.w{name}"], params[f"{prefix}.b{name}"])
        return y.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = project(q_in, "q", Bq, Tq)
    k = project(kv_in, "k", Bk, Tk)
    v = project(kv_in, "v", Bk, Tk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + mask
    ctx = ad.softmax(scores) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(max(Bq, Bk), Tq, D)
    return ad.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _lstm(params, prefix: str, x: Tensor) -> Tensor:
    B, T, D = x.shape
    xz = ad.linear(x, params[f"{prefix}.wx"], params[f"{prefix}.b"])
    wh = params[f"{prefix}.wh"]
    h = Tensor(np.zeros((B, D), dtype=x.data.dtype))
    c = h
    outs = []
    for t in range(T):
        z = xz[:, t] + h @ wh
        i = ad.sigmoid(z[:, :D])
        f = ad.sigmoid(z[:, D:2 * D])
        g = ad.tanh(z[:, 2 * D:3 * D])
        o = ad.sigmoid(z[:, 3 * D:])
        c = f * c + i * g
        h = o * ad.tanh(c)
        outs.append(h)
    return ad.stack(outs, axis=1)


def key_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    """Additive attention mask (B,1,1,T) hiding padded frames."""
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE), k=1)[None, None]


# ---- network heads --------------------------------------------------------------

def encode(features, cfg: ModelConfig, params: dict[str, Tensor], training: bool = False,
           rng: np.random.Generator | None = None, lengths=None) -> Encoding:
    """Acoustic encoder producing the hidden sequence H."""
    x = np.asarray(features.data if isinstance(features, Tensor) else features)
    if x.ndim == 2:
        x = x[None]
    B, T, d = x.shape
    if T == 0:
        raise ValueError("encode: empty feature sequence")
    if d != cfg.feature_dim:
        raise ShapeError(f"encode: feature dim {d} does not match model.feature_dim {cfg.feature_dim}")
    if not np.all(np.isfinite(x)):
        raise ad.NumericError("encode: non-finite features")
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    dtype = params["enc.in.w"].data.dtype
    x = x.astype(dtype)
    if cfg.subsample == 2:
        if T % 2:
            x = np.concatenate([x, np.zeros((B, 1, d), dtype=dtype)], axis=1)
        x = x.reshape(B, -1, 2 * d)
        lengths = (lengths + 1) // 2
    Tp = x.shape[1]
    drop = cfg.dropout_p
    h = ad.linear(Tensor(x), params["enc.in.w"], params["enc.in.b"])
    if cfg.encoder_kind == "self_attention":
        h = h + positional_encoding(Tp, cfg.model_dim)
        h = ad.dropout(h, drop, rng, training)
        mask = key_mask(lengths, Tp)
        for i in range(cfg.encoder_layers):
            p = f"enc.{i}"
            y = _layer_norm(h, params, f"{p}.ln1")
            a = _attention(params, f"{p}.att", y, y, mask, cfg.attention_heads)
            h = h + ad.dropout(a, drop, rng, training)
            f = _ffn(params, f"{p}.ffn", _layer_norm(h, params, f"{p}.ln2"))
            h = h + ad.dropout(f, drop, rng, training)
    else:
        h = ad.dropout(h, drop, rng, training)
        for i in range(cfg.encoder_layers):
            h = ad.dropout(_lstm(params, f"enc.{i}.lstm", h), drop, rng, training)
    return Encoding(_layer_norm(h, params, "enc.ln"), lengths)


def ctc_head(enc: Encoding, params: dict[str, Tensor]) -> Tensor:
    """Per-frame log posteriors over the vocabulary, blank included."""
    return ad.log_softmax(ad.linear(enc.hidden, params["ctc.w"], params["ctc.b"]))


def decoder_forward(ids, enc: Encoding, cfg: ModelConfig, params: dict[str, Tensor],
                    training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced decoder pass: ``ids`` (B, n) -> log posteriors (B, n, V).

    Row ``i`` is the distribution of the token following ``ids[:, :i+1]``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    n = ids.shape[1]
    drop = cfg.dropout_p
    x = ad.embedding(params["dec.emb"], ids) * math.sqrt(cfg.model_dim) + positional_encoding(n, cfg.model_dim)
    x = ad.dropout(x, drop, rng, training)
    self_mask = causal_mask(n)
    cross_mask = key_mask(enc.lengths, enc.frame_count)
    H = enc.hidden
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        y = _layer_norm(x, params, f"{p}.ln1")
        x = x + ad.dropout(_attention(params, f"{p}.self", y, y, self_mask, cfg.attention_heads), drop, rng, training)
        y = _layer_norm(x, params, f"{p}.ln2")
        x = x + ad.dropout(_attention(params, f"{p}.cross", y, H, cross_mask, cfg.attention_heads), drop, rng, training)
        y = _layer_norm(x, params, f"{p}.ln3")
        x = x + ad.dropout(_ffn(params, f"{p}.ffn", y), drop, rng, training)
    x = _layer_norm(x, params, "dec.ln")
    return ad.log_softmax(ad.linear(x, params["dec.out.w"], params["dec.out.b"]))


def _check_prefix(prefix: Sequence[int]) -> None:
    if not prefix or prefix[0] != SENTINEL:
        raise ValueError("decoder prefix must start with the sentinel token")
    if BLANK in prefix:
        raise ValueError("decoder prefix must not contain the blank token")


def decode_step(prefix: Sequence[int], enc: Encoding, cfg: ModelConfig, params: dict[str, Tensor],
                training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Log-distribution (V,) over the token following ``prefix``."""
    _check_prefix(prefix)
    with ad.no_grad():
        out = decoder_forward(np.array([prefix]), enc, cfg, params, training, rng)
    return out.data[0, -1]


def teacher_forcing(targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decoder inputs ``<s> y``, outputs ``y <s>`` and the validity mask, padded."""
    n = max(len(t) for t in targets) + 1
    B = len(targets)
    dec_in = np.full((B, n), SENTINEL, dtype=np.int64)
    dec_out = np.zeros((B, n), dtype=np.int64)
    mask = np.zeros((B, n), dtype=bool)
    for b, tgt in enumerate(targets):
        L = len(tgt)
        dec_in[b, 1:L + 1] = tgt
        dec_out[b, :L] = tgt
        dec_out[b, L] = SENTINEL
        mask[b, :L + 1] = True
    return dec_in, dec_out, mask


def attention_nll(log_probs: Tensor, targets, mask=None) -> Tensor:
    """Per-utterance mean negative log-likelihood of the gold tokens (B,)."""
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.shape[:-1] != targets.shape:
        raise ShapeError(f"attention loss: posteriors {log_probs.shape} vs targets {targets.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    picked = ad.gather_last(log_probs, targets[..., None])[..., 0]
    counts = mask.sum(axis=-1)
    return -(picked * mask.astype(picked.data.dtype)).sum(axis=-1) * (1.0 / counts)


def attention_loss(log_probs: Tensor, targets, mask=None) -> Tensor:
    """Cross-entropy of the decoder posteriors against sentinel-terminated targets.

    ``(n, V)`` posteriors with an ``(n,)`` target give the mean over positions;
    batched inputs are averaged per utterance and then over the batch.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if log_probs.ndim == 2:
        if log_probs.shape[0] != targets.shape[0]:
            raise ShapeError(f"attention loss: {log_probs.shape[0]} positions vs target length {targets.shape[0]}")
        if targets.shape[0] == 0 or targets[-1] != SENTINEL:
            raise ValueError("attention target must end with the sentinel")
        return attention_nll(log_probs.reshape(1, *log_probs.shape), targets[None]).sum()
    return attention_nll(log_probs, targets, mask).mean()


def score_sequences(seqs: Sequence[Sequence[int]], enc: Encoding, cfg: ModelConfig,
                    params: dict[str, Tensor]) -> np.ndarray:
    """Sum of decoder log-probabilities of each sequence plus its end sentinel."""
    dec_in, dec_out, mask = teacher_forcing([list(s) for s in seqs])
    with ad.no_grad():
        lp = decoder_forward(dec_in, enc, cfg, params).data
    picked = np.take_along_axis(lp, dec_out[..., None], axis=-1)[..., 0]
    return np.where(mask, picked, 0.0).sum(axis=1)


def attention_decode(enc: Encoding, cfg: ModelConfig, params: dict[str, Tensor], beam: int,
                     max_len: int | None = None) -> Hypothesis:
    """Beam search over the attention decoder.

    At each step the ``beam`` best extensions are kept; those ending in the
    sentinel are set aside as finished.  ``max_len`` bounds the number of
    emitted symbols (sentinel included) and defaults to ``2*T' + 5``.  If
    nothing finished, the best open prefix is returned with
    ``terminated=False``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len is None:
        max_len = 2 * int(enc.lengths[0]) + 5
    live: list[tuple[tuple[int, ...], float]] = [((SENTINEL,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        ids = np.array([p for p, _ in live])
        with ad.no_grad():
            lp = decoder_forward(ids, enc, cfg, params).data[:, -1, :]
        cands = []
        for (prefix, score), row in zip(live, lp.tolist()):
            for tok, tok_lp in enumerate(row):
                if tok != BLANK:
                    cands.append((score + tok_lp, prefix + (tok,)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in cands[:beam]:
            if seq[-1] == SENTINEL:
                finished.append((seq[1:-1], score))
            else:
                live.append((seq, score))
        if not live:
            break
        if finished and max(s for _, s in finished) >= live[0][1]:
            break
    if finished:
        tokens, score = min(finished, key=lambda f: (-f[1], len(f[0]), f[0]))
        return Hypothesis(tuple(tokens), float(score))
    prefix, score = live[0]
    return Hypothesis(tuple(prefix[1:]), float(score), terminated=False)


def rescore(candidates: Sequence[Hypothesis], enc: Encoding, cfg: ModelConfig,
            params: dict[str, Tensor]) -> Hypothesis:
    """Pick the CTC candidate the attention decoder scores highest.

    Ties go to the higher CTC score, then to the shorter sequence.  The
    returned hypothesis carries its attention log score.
    """
    if not candidates:
        raise ValueError("rescore needs at least one candidate")
    scores = score_sequences([c.tokens for c in candidates], enc, cfg, params)
    best = min(range(len(candidates)),
               key=lambda i: (-scores[i], -candidates[i].log_score, len(candidates[i].tokens), i))
    return Hypothesis(candidates[best].tokens, float(scores[best]))
