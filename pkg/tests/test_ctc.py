import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from san import autodiff as ad
from san.autodiff import Tensor
from san.ctc import (augment, collapse, ctc_loss, greedy_decode, is_feasible, min_frames,
                     prefix_beam_decode)

from oracles import collapse_ref, ctc_nll_bruteforce, exhaustive_best, random_log_probs

BLK, S, A, B = 0, 1, 2, 3


def uniform_third():
    """Rows putting 1/3 on blank, a and b, nothing on the sentinel."""
    row = np.log(np.array([1 / 3, 1e-300, 1 / 3, 1 / 3]))
    return np.tile(row, (2, 1))


def test_hand_examples():
    lp = Tensor(uniform_third())
    assert ctc_loss(lp, [A]).item() == pytest.approx(math.log(3), abs=1e-12)
    assert ctc_loss(lp, [A, B]).item() == pytest.approx(math.log(9), abs=1e-12)


def test_infeasible_repeat_is_inf_with_zero_gradient():
    lp = Tensor(uniform_third(), requires_grad=True)
    loss = ctc_loss(lp, [A, A])
    assert loss.item() == math.inf
    ad.backward(loss)
    assert np.all(lp.grad == 0)


def test_empty_target_is_all_blank():
    lp = random_log_probs(np.random.default_rng(0), 5, 4)
    assert ctc_loss(Tensor(lp), []).item() == pytest.approx(-lp[:, BLK].sum(), abs=1e-12)


def test_rejects_blank_and_out_of_range_ids():
    lp = Tensor(random_log_probs(np.random.default_rng(0), 3, 4))
    with pytest.raises(ValueError):
        ctc_loss(lp, [BLK, A])
    with pytest.raises(ValueError):
        ctc_loss(lp, [4])


def test_augment_and_min_frames():
    assert augment([A, B]) == [BLK, A, BLK, B, BLK]
    assert min_frames([A, A, B, B]) == 6 and min_frames([]) == 0
    assert is_feasible(2, [A, B]) and not is_feasible(2, [A, A])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6), st.integers(3, 4), st.data())
def test_matches_bruteforce(seed, T, V, data):
    rng = np.random.default_rng(seed)
    lp = random_log_probs(rng, T, V)
    target = data.draw(st.lists(st.integers(1, V - 1), max_size=4))
    got = ctc_loss(Tensor(lp), target).item()
    want = ctc_nll_bruteforce(lp, target)
    if math.isinf(want):
        assert math.isinf(got)
    else:
        assert abs(got - want) <= 1e-8


def test_batched_with_lengths_matches_single():
    rng = np.random.default_rng(7)
    lp = random_log_probs(rng, 6, 5)[None].repeat(3, axis=0)
    lp[1] = random_log_probs(rng, 6, 5)
    lp[2, 4:] = 0.0  # padding, ignored
    targets = [[A, B], [B, B, 4], [4]]
    lengths = [6, 6, 4]
    batched = ctc_loss(Tensor(lp), targets, lengths).data
    for b in range(3):
        single = ctc_loss(Tensor(lp[b, :lengths[b]]), targets[b]).item()
        assert batched[b] == pytest.approx(single, abs=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    err = ad.grad_check(lambda: ctc_loss(ad.log_softmax(logits), [A, B, B]), {"logits": logits})
    assert err < 1e-4


def test_gradient_is_negative_occupancy():
    # d loss / d log_probs sums to -1 per frame: every frame is occupied by exactly one state
    lp = Tensor(random_log_probs(np.random.default_rng(3), 7, 4), requires_grad=True)
    ad.backward(ctc_loss(lp, [A, B, A]))
    assert np.allclose(lp.grad.sum(axis=1), -1.0, atol=1e-12)
    assert np.all(lp.grad <= 0)


# ---- collapse and decoders -------------------------------------------------------

def test_collapse_examples():
    assert collapse([BLK, A, A, BLK, B]) == (A, B)
    assert collapse([BLK, BLK]) == ()
    assert collapse([A, BLK, A]) == (A, A)


@given(st.lists(st.integers(0, 4), max_size=12))
def test_collapse_blank_free_and_idempotent_without_repeats(path):
    out = collapse(path)
    assert BLK not in out
    assert out == collapse_ref(path)
    # (a, blk, a) -> (a, a) -> (a): a second pass only changes outputs that hold a repeat
    if all(x != y for x, y in zip(out, out[1:])):
        assert collapse(out) == out


def onehot_path(path, V=5, p=0.9):
    rows = np.full((len(path), V), (1 - p) / (V - 1))
    rows[np.arange(len(path)), path] = p
    return np.log(rows)


def test_greedy_examples():
    assert greedy_decode(onehot_path([BLK, A, A, BLK, B])).tokens == (A, B)
    assert greedy_decode(onehot_path([BLK, BLK, BLK])).tokens == ()
    assert greedy_decode(onehot_path([A])).tokens == (A,)


def test_greedy_score_and_tie_break():
    lp = np.log(np.array([[0.25, 0.0, 0.25, 0.25, 0.25], [0.1, 0.0, 0.3, 0.3, 0.3]]) + 1e-300)
    hyp = greedy_decode(lp)
    assert hyp.tokens == (A,)
    assert hyp.log_score == pytest.approx(math.log(0.25) + math.log(0.3))


def test_greedy_never_emits_sentinel():
    lp = onehot_path([S, S, A])
    assert greedy_decode(lp).tokens == (A,)


def test_prefix_beam_examples():
    lp = np.log(np.array([[0.5, 1e-300, 0.3, 0.2]]))
    top = prefix_beam_decode(lp, beam_width=4, k=3)
    assert top[0].tokens == () and top[0].log_score == pytest.approx(math.log(0.5))
    assert [h.tokens for h in top] == [(), (A,), (B,)]
    certain = np.log(np.array([[1e-300, 1e-300, 1.0, 1e-300]] * 3))
    top = prefix_beam_decode(certain, beam_width=2, k=1)
    assert top[0].tokens == (A,) and top[0].log_score == pytest.approx(0.0, abs=1e-12)


def test_prefix_beam_truncation_flag_and_validation():
    lp = np.log(np.array([[1.0, 1e-300, 1e-300]]))
    out = prefix_beam_decode(lp, beam_width=5, k=5)
    assert out.truncated and 1 <= len(out) < 5
    with pytest.raises(ValueError):
        prefix_beam_decode(lp, beam_width=1, k=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
def test_prefix_beam_saturated_equals_exhaustive(seed, T):
    lp = random_log_probs(np.random.default_rng(seed), T, 4)
    best = prefix_beam_decode(lp, beam_width=4 ** T, k=1)[0]
    assert best.tokens == exhaustive_best(lp)


def test_prefix_beam_mass_equals_ctc_likelihood():
    lp = random_log_probs(np.random.default_rng(9), 5, 4)
    for hyp in prefix_beam_decode(lp, beam_width=256, k=5):
        assert -hyp.log_score == pytest.approx(ctc_loss(Tensor(lp), list(hyp.tokens)).item(), abs=1e-10)
