import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from san import autodiff as ad
from san import siamese as S
from san.autodiff import Tensor
from san.data import SynthConfig, generate_dataset, make_batch
from san.errors import ConfigError
from san.model import ModelConfig, init_params, to_tensors
from san.siamese import (AdamState, LossBreakdown, StepStats, TrainConfig, adam_update, dual_forward,
                         kl_loss, lr_schedule, position_kl, total_loss, train_step)


@pytest.fixture(scope="module")
def corpus():
    cfg = SynthConfig(n_tokens=4, feature_dim=8, n_train=16, n_dev=0, n_test=0, utterance_len=(2, 3),
                      confusable_pairs=[(0, 1, 0.25)])
    return generate_dataset(cfg)["train"]


def tiny(dropout=0.1):
    return ModelConfig(dropout_p=dropout)


def arrays(cfg, seed=0):
    return init_params(cfg, ad.make_rng(seed))


# ---- KL ------------------------------------------------------------------------

def test_position_kl_hand_value():
    p = Tensor(np.log([[0.75, 0.25]]))
    q = Tensor(np.log([[0.25, 0.75]]))
    half_ln3 = 0.5 * math.log(3)
    assert position_kl(p, q, "forward").data[0] == pytest.approx(half_ln3, abs=1e-15)
    assert position_kl(p, q, "reverse").data[0] == pytest.approx(half_ln3, abs=1e-15)
    assert position_kl(p, q, "symmetric").data[0] == pytest.approx(half_ln3, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6), st.sampled_from(S.KL_DIRECTIONS))
def test_kl_non_negative_and_zero_iff_equal(seed, V, direction):
    rng = np.random.default_rng(seed)
    a = ad.log_softmax(Tensor(rng.standard_normal((3, V))))
    b = ad.log_softmax(Tensor(rng.standard_normal((3, V))))
    assert np.all(position_kl(a, b, direction).data >= -1e-15)
    assert np.all(np.abs(position_kl(a, a, direction).data) <= 1e-12)
    if not np.allclose(a.data, b.data):
        assert position_kl(a, b, direction).data.max() > 1e-12


def test_kl_permutation_invariant():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal(5), rng.standard_normal(5)
    perm = rng.permutation(5)
    a, b = ad.log_softmax(Tensor(x)), ad.log_softmax(Tensor(y))
    pa, pb = ad.log_softmax(Tensor(x[perm])), ad.log_softmax(Tensor(y[perm]))
    assert position_kl(a, b).item() == pytest.approx(position_kl(pa, pb).item(), abs=1e-14)


def test_kl_gradient_checks():
    rng = np.random.default_rng(2)
    x, y = Tensor(rng.standard_normal((2, 4)), requires_grad=True), Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    for direction in S.KL_DIRECTIONS:
        err = ad.grad_check(lambda: position_kl(ad.log_softmax(x), ad.log_softmax(y), direction).sum(),
                            {"x": x, "y": y})
        assert err < 1e-5


def test_kl_empty_mask_is_error(corpus):
    cfg = tiny()
    pair = dual_forward(make_batch(corpus[:2]), to_tensors(arrays(cfg)), cfg, ad.make_rng(0))
    with pytest.raises(ValueError):
        kl_loss(pair, frame_mask=np.zeros_like(pair.frame_mask))


def test_kl_stop_gradient_blocks_second_pass():
    a = Tensor(np.log([[0.6, 0.4]]), requires_grad=True)
    b = Tensor(np.log([[0.3, 0.7]]), requires_grad=True)
    pair = S.SiamesePair(S.PassOutput(a, a, None, None), S.PassOutput(b, b, None, None), 1, 2,
                         np.ones((1, 1), bool), np.ones((1, 1), bool))
    ad.backward(kl_loss(pair, stop_gradient=True))
    assert b.grad is None and a.grad is not None


# ---- dual forward --------------------------------------------------------------

def test_dual_forward_seeds_distinct_and_deterministic(corpus):
    cfg = tiny()
    params = to_tensors(arrays(cfg))
    batch = make_batch(corpus[:3])
    p1 = dual_forward(batch, params, cfg, ad.make_rng([0, 1]))
    p2 = dual_forward(batch, params, cfg, ad.make_rng([0, 1]))
    assert p1.mask_seed1 != p1.mask_seed2
    assert (p1.mask_seed1, p1.mask_seed2) == (p2.mask_seed1, p2.mask_seed2)
    assert np.array_equal(p1.pass1.attn_log_probs.data, p2.pass1.attn_log_probs.data)
    assert np.array_equal(p1.pass2.ctc_log_probs.data, p2.pass2.ctc_log_probs.data)


def test_zero_dropout_passes_identical(corpus):
    cfg = tiny(0.0)
    pair = dual_forward(make_batch(corpus[:4]), to_tensors(arrays(cfg)), cfg, ad.make_rng(3))
    assert np.array_equal(pair.pass1.ctc_log_probs.data, pair.pass2.ctc_log_probs.data)
    assert np.array_equal(pair.pass1.attn_log_probs.data, pair.pass2.attn_log_probs.data)
    assert abs(kl_loss(pair).item()) <= 1e-12


def test_dropout_makes_kl_positive(corpus):
    cfg = tiny(0.1)
    params = to_tensors(arrays(cfg))
    batch = make_batch(corpus[:2])
    positive = sum(kl_loss(dual_forward(batch, params, cfg, ad.make_rng(s))).item() > 0 for s in range(20))
    assert positive == 20


# ---- loss arithmetic and schedule ----------------------------------------------

def test_total_loss_arithmetic():
    one = lambda v: Tensor(float(v))  # noqa: E731
    pair = S.SiamesePair(S.PassOutput(None, None, one(1.0), one(1.5)), S.PassOutput(None, None, one(1.0), one(2.5)),
                         1, 2, None, None)
    out = total_loss(pair, Tensor(0.1), TrainConfig())
    assert (out.l_ctc, out.l_attn) == (2.0, 4.0)
    assert out.l_all == pytest.approx(3.2, abs=1e-15)
    assert out.l_all == out.lambda1 * out.l_ctc + out.lambda2 * out.l_attn + out.lambda3 * out.l_kl
    base = total_loss(pair, Tensor(0.1), TrainConfig(lambda3=0.0))
    assert base.l_all == 0.5 * 2.0 + 0.5 * 4.0 and base.l_kl == pytest.approx(0.1)


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.peak_lr) == (0.5, 0.5, 2.0, 0.002)
    assert cfg.kl_direction == "symmetric" and cfg.kl_on_ctc and cfg.kl_on_attention


@pytest.mark.parametrize("kwargs", [dict(warmup_steps=0), dict(beta1=1.0), dict(beta2=-0.1), dict(lambda3=-1.0),
                                    dict(kl_direction="js"), dict(batch_size=0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_lr_schedule_examples_and_shape():
    cfg = TrainConfig(peak_lr=0.002, warmup_steps=100)
    assert lr_schedule(100, cfg) == pytest.approx(0.002)
    assert lr_schedule(50, cfg) == pytest.approx(0.001)
    assert lr_schedule(400, cfg) == pytest.approx(0.001)
    lrs = [lr_schedule(s, cfg) for s in range(1, 400)]
    assert all(a < b for a, b in zip(lrs[:99], lrs[1:100]))
    assert all(a > b for a, b in zip(lrs[99:], lrs[100:]))
    with pytest.raises(ValueError):
        lr_schedule(0, cfg)


# ---- optimizer and train_step --------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([0.5, -1.25]), "b": np.array([0.0])}
    state = AdamState.zeros(params)
    out = adam_update(params, {k: np.zeros_like(v) for k, v in params.items()}, state, 0.01, TrainConfig())
    assert all(np.array_equal(out[k], params[k]) for k in params)
    assert state.step == 1


def test_train_step_deterministic(corpus):
    mcfg, tcfg = tiny(), TrainConfig(warmup_steps=10, batch_size=4)
    runs = []
    for _ in range(2):
        params, opt = arrays(mcfg), AdamState.zeros(arrays(mcfg))
        for step in range(1, 11):
            params, opt, _ = train_step(make_batch(corpus[(step % 4) * 4:(step % 4) * 4 + 4]), params, opt,
                                        mcfg, tcfg, step)
        runs.append(params)
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def test_loss_descends_on_fixed_batch(corpus):
    mcfg, tcfg = tiny(0.0), TrainConfig(warmup_steps=10, peak_lr=0.005)
    batch = make_batch(corpus[:4])
    params, opt = arrays(mcfg), AdamState.zeros(arrays(mcfg))
    losses = []
    for step in range(1, 51):
        params, opt, br = train_step(batch, params, opt, mcfg, tcfg, step)
        losses.append(br.l_all)
    assert losses[-1] < losses[0]
    # strict descent after warmup has settled
    assert all(b < a for a, b in zip(losses[10:], losses[11:]))


def test_zero_dropout_san_equals_baseline(corpus):
    mcfg = tiny(0.0)
    results = []
    for lam3 in (0.0, 2.0):
        tcfg = TrainConfig(warmup_steps=5, lambda3=lam3)
        params, opt = arrays(mcfg), AdamState.zeros(arrays(mcfg))
        for step in range(1, 6):
            params, opt, br = train_step(make_batch(corpus[:4]), params, opt, mcfg, tcfg, step)
            assert abs(br.l_kl) <= 1e-12
        results.append(params)
    assert all(np.array_equal(results[0][k], results[1][k]) for k in results[0])


def test_non_finite_gradient_rejected(corpus, monkeypatch):
    mcfg, tcfg = tiny(), TrainConfig()
    params = arrays(mcfg)
    opt = AdamState.zeros(params)
    monkeypatch.setattr(S, "global_norm", lambda grads: math.nan)
    stats = StepStats()
    new, opt2, br = train_step(make_batch(corpus[:2]), params, opt, mcfg, tcfg, 1, stats)
    assert br is None and stats.rejected_steps == 1 and new is params and opt2.step == 0


def test_infeasible_utterances_skipped(corpus):
    mcfg = ModelConfig(subsample=2, feature_dim=8)
    utt = dataclasses.replace(corpus[0], features=corpus[0].features[:3], tokens=(2, 3, 4))
    batch = make_batch([utt, corpus[1]])
    stats = StepStats()
    params = arrays(mcfg)
    _, _, br = train_step(batch, params, AdamState.zeros(params), mcfg, TrainConfig(), 1, stats)
    assert stats.skipped_utterances == 1 and isinstance(br, LossBreakdown)
    alone = make_batch([utt])
    _, _, br = train_step(alone, params, AdamState.zeros(params), mcfg, TrainConfig(), 1, stats)
    assert br is None and stats.skipped_utterances == 2


def test_batched_san_gradient_with_padding(corpus):
    mcfg = tiny(0.0)
    rng = ad.make_rng(7)
    params = to_tensors({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in arrays(mcfg).items()},
                        requires_grad=True)
    subset = {k: params[k] for k in ("enc.in.w", "enc.1.att.wo", "ctc.b", "dec.emb", "dec.0.self.wq")}
    batch = make_batch(corpus[:2])

    def f():
        return S.siamese_objective(batch, params, mcfg, TrainConfig(), ad.make_rng(1))[1].objective

    assert ad.grad_check(f, subset) < 1e-4
