"""Siamese dropout training: two passes through one parameter set, unified by KL.

Both passes see the same batch and the same parameters; only their dropout
masks differ (each pass draws from its own seed).  The objective is::

    l_all = lambda1 * (ctc_1 + ctc_2) + lambda2 * (attn_1 + attn_2) + lambda3 * kl

where ``kl`` compares the two passes' CTC frame posteriors and attention token
posteriors position by position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import to_f32
from .ctc import ctc_loss, is_feasible
from .data import Batch
from .errors import ConfigError
from .model import ModelConfig, attention_nll, ctc_head, decoder_forward, encode, teacher_forcing

KL_DIRECTIONS = ("symmetric", "forward", "reverse")


@dataclass
class TrainConfig:
    peak_lr: float = 0.002
    warmup_steps: int = 25000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_size: int = 32
    epochs: int = 15
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 2.0
    average_last_n: int = 30
    master_seed: int = 0
    clip_norm: float = 5.0
    kl_direction: str = "symmetric"
    kl_on_ctc: bool = True
    kl_on_attention: bool = True
    kl_stop_gradient: bool = False

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("train.warmup_steps must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.peak_lr <= 0 or self.adam_eps <= 0:
            raise ConfigError("train.peak_lr and train.adam_eps must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.batch_size and train.epochs must be >= 1")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"train.kl_direction must be one of {KL_DIRECTIONS}")
        if self.average_last_n < 1:
            raise ConfigError("train.average_last_n must be >= 1")
        if self.clip_norm < 0:
            raise ConfigError("train.clip_norm must be >= 0 (0 disables clipping)")


@dataclass
class PassOutput:
    ctc_log_probs: Tensor       # (B, T', V)
    attn_log_probs: Tensor      # (B, n, V)
    l_ctc: Tensor               # batch-mean CTC negative log-likelihood
    l_attn: Tensor              # batch-mean attention cross-entropy


@dataclass
class SiamesePair:
    pass1: PassOutput
    pass2: PassOutput
    mask_seed1: int
    mask_seed2: int
    frame_mask: np.ndarray      # (B, T')
    token_mask: np.ndarray      # (B, n)


@dataclass
class LossBreakdown:
    l_ctc: float
    l_attn: float
    l_kl: float
    l_all: float
    lambda1: float
    lambda2: float
    lambda3: float
    objective: Tensor | None = None


def feasible_subset(batch: Batch, cfg: ModelConfig) -> tuple[Batch, int]:
    """Drop utterances whose target cannot be aligned to the encoder frames."""
    from .data import make_batch

    keep = []
    for utt in batch.utterances:
        frames = utt.features.shape[0]
        if cfg.subsample == 2:
            frames = (frames + 1) // 2
        if is_feasible(frames, utt.tokens):
            keep.append(utt)
    skipped = len(batch) - len(keep)
    if not skipped:
        return batch, 0
    return (make_batch(keep) if keep else None), skipped


def forward_pass(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig, training: bool,
                 rng: np.random.Generator | None) -> tuple[PassOutput, np.ndarray, np.ndarray]:
    enc = encode(batch.features, cfg, params, training, rng, lengths=batch.lengths)
    ctc_lp = ctc_head(enc, params)
    l_ctc = ctc_loss(ctc_lp, batch.token_lists, enc.lengths).mean()
    dec_in, dec_out, token_mask = teacher_forcing(batch.token_lists)
    attn_lp = decoder_forward(dec_in, enc, cfg, params, training, rng)
    l_attn = attention_nll(attn_lp, dec_out, token_mask).mean()
    frame_mask = np.arange(enc.frame_count)[None, :] < enc.lengths[:, None]
    return PassOutput(ctc_lp, attn_lp, l_ctc, l_attn), frame_mask, token_mask


def draw_mask_seeds(step_rng: np.random.Generator) -> tuple[int, int]:
    s1 = int(step_rng.integers(2 ** 63))
    s2 = int(step_rng.integers(2 ** 63))
    while s2 == s1:
        s2 = int(step_rng.integers(2 ** 63))
    return s1, s2


def dual_forward(batch: Batch, params: dict[str, Tensor], cfg: ModelConfig,
                 step_rng: np.random.Generator, training: bool = True) -> SiamesePair:
    """Run the shared network twice with independently seeded dropout."""
    s1, s2 = draw_mask_seeds(step_rng)
    p1, frame_mask, token_mask = forward_pass(batch, params, cfg, training, ad.make_rng(s1))
    p2, _, _ = forward_pass(batch, params, cfg, training, ad.make_rng(s2))
    return SiamesePair(p1, p2, s1, s2, frame_mask, token_mask)


def position_kl(lp1: Tensor, lp2: Tensor, direction: str = "symmetric") -> Tensor:
    """KL divergence at each position between two log-distributions (last axis)."""
    if lp1.shape != lp2.shape:
        raise ad.ShapeError(f"KL operands differ in shape: {lp1.shape} vs {lp2.shape}")
    diff = lp1 - lp2
    if direction == "forward":
        return (ad.exp(lp1) * diff).sum(axis=-1)
    if direction == "reverse":
        return (ad.exp(lp2) * (-diff)).sum(axis=-1)
    if direction == "symmetric":
        return ((ad.exp(lp1) - ad.exp(lp2)) * diff).sum(axis=-1) * 0.5
    raise ValueError(f"unknown KL direction {direction!r}")


def kl_loss(pair: SiamesePair, frame_mask=None, token_mask=None, direction: str = "symmetric",
            on_ctc: bool = True, on_attention: bool = True, stop_gradient: bool = False) -> Tensor:
    """Position-averaged KL between the two passes, summed over the enabled heads."""
    frame_mask = pair.frame_mask if frame_mask is None else frame_mask
    token_mask = pair.token_mask if token_mask is None else token_mask
    total = Tensor(0.0)
    terms = []
    if on_ctc:
        terms.append((pair.pass1.ctc_log_probs, pair.pass2.ctc_log_probs, frame_mask))
    if on_attention:
        terms.append((pair.pass1.attn_log_probs, pair.pass2.attn_log_probs, token_mask))
    for lp1, lp2, mask in terms:
        if stop_gradient:
            lp2 = lp2.detach()
        total = total + ad.masked_mean(position_kl(lp1, lp2, direction), mask)
    return total


def total_loss(pair: SiamesePair, kl: Tensor, cfg: TrainConfig) -> LossBreakdown:
    l_ctc = pair.pass1.l_ctc + pair.pass2.l_ctc
    l_attn = pair.pass1.l_attn + pair.pass2.l_attn
    objective = l_ctc * cfg.lambda1 + l_attn * cfg.lambda2 + ad.as_tensor(kl) * cfg.lambda3
    return LossBreakdown(
        l_ctc=l_ctc.item(), l_attn=l_attn.item(), l_kl=ad.as_tensor(kl).item(), l_all=objective.item(),
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, lambda3=cfg.lambda3, objective=objective)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("learning-rate step counter starts at 1")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


# ---- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                lr: float, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step; new values are rounded to single precision
    so that checkpoints capture the training state exactly."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    out = {}
    for name in sorted(params):
        g = grads[name]
        m = to_f32(b1 * state.m[name] + (1 - b1) * g)
        v = to_f32(b2 * state.v[name] + (1 - b2) * g * g)
        state.m[name], state.v[name] = m, v
        out[name] = to_f32(params[name] - lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps))
    state.step = t
    return out


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items())))


@dataclass
class StepStats:
    skipped_utterances: int = 0
    rejected_steps: int = 0


def siamese_objective(batch: Batch, params: dict[str, Tensor], mcfg: ModelConfig, tcfg: TrainConfig,
                      step_rng: np.random.Generator, training: bool = True) -> tuple[SiamesePair, LossBreakdown]:
    pair = dual_forward(batch, params, mcfg, step_rng, training)
    kl = kl_loss(pair, direction=tcfg.kl_direction, on_ctc=tcfg.kl_on_ctc,
                 on_attention=tcfg.kl_on_attention, stop_gradient=tcfg.kl_stop_gradient)
    return pair, total_loss(pair, kl, tcfg)


def train_step(batch: Batch, params: dict[str, np.ndarray], opt: AdamState, mcfg: ModelConfig,
               tcfg: TrainConfig, step: int, stats: StepStats | None = None
               ) -> tuple[dict[str, np.ndarray], AdamState, LossBreakdown | None]:
    """Forward both passes, backpropagate ``l_all`` and apply one Adam update.

    ``step`` is 1-based and seeds the dropout masks, so a step's outcome
    depends only on (master_seed, step, batch, params, optimizer state).
    Returns ``None`` for the breakdown when nothing was applied.
    """
    stats = stats if stats is not None else StepStats()
    batch, skipped = feasible_subset(batch, mcfg)
    stats.skipped_utterances += skipped
    if batch is None:
        return params, opt, None
    tensors = {k: Tensor(a, requires_grad=True) for k, a in params.items()}
    step_rng = ad.make_rng([tcfg.master_seed, step])
    _, losses = siamese_objective(batch, tensors, mcfg, tcfg, step_rng)
    ad.backward(losses.objective)
    grads = {k: (np.zeros_like(a) if tensors[k].grad is None else np.asarray(tensors[k].grad))
             for k, a in params.items()}
    norm = global_norm(grads)
    if not math.isfinite(norm) or not math.isfinite(losses.l_all):
        stats.rejected_steps += 1
        return params, opt, None
    if tcfg.clip_norm > 0 and norm > tcfg.clip_norm:
        scale = tcfg.clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    params = adam_update(params, grads, opt, lr_schedule(step, tcfg), tcfg)
    losses.objective = None
    return params, opt, losses
