import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_kv.metrics import attention_flops, lcs_length, perplexity, rouge_l_f1
from elastic_kv.oracle import oracle_lcs

seqs = st.lists(st.integers(0, 4), max_size=10)


def test_ppl_certain_model():
    logits = np.full((3, 5), -1e4)
    logits[np.arange(3), [1, 2, 3]] = 0.0
    r = perplexity(logits, [1, 2, 3])
    assert r.ppl == pytest.approx(1.0, abs=1e-12)
    assert r.n_positions == 3


def test_ppl_uniform_is_vocab():
    assert abs(perplexity(np.zeros((4, 259)), [0, 7, 100, 258]).ppl - 259) < 1e-9


def test_ppl_hand_probabilities():
    logits = np.log(np.array([[0.5, 0.25, 0.25], [0.125, 0.875, 0.0 + 1e-300]]))
    r = perplexity(logits, [0, 0])
    assert r.ppl == pytest.approx(4.0, rel=1e-12)
    assert r.mean_ce == pytest.approx((math.log(2) + math.log(8)) / 2, rel=1e-12)


def test_ppl_errors():
    with pytest.raises(ValueError):
        perplexity(np.zeros((2, 3)), [0])
    with pytest.raises(ValueError):
        perplexity(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        perplexity(np.zeros((1, 3)), [3])


@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_ppl_shift_invariant_and_consistent(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((6, 11)) * 3
    tgt = rng.integers(0, 11, 6)
    a, b = perplexity(logits, tgt), perplexity(logits + shift, tgt)
    assert a.ppl == pytest.approx(b.ppl, rel=1e-9)
    assert a.ppl >= 1.0
    assert abs(a.ppl - math.exp(a.mean_ce)) <= 1e-12 * a.ppl


def test_rouge_examples():
    assert rouge_l_f1(b"abc", b"abc").f1 == 1.0
    assert rouge_l_f1(b"abc", b"xyz").f1 == 0.0
    r = rouge_l_f1(list(b"the cat"), list(b"the cat sat"))
    assert r.lcs_len == 7
    assert r.precision == 1.0 and r.recall == pytest.approx(7 / 11)


def test_rouge_word_level_example():
    r = rouge_l_f1("the cat".split(), "the cat sat".split())
    assert (r.lcs_len, r.precision, r.recall) == (2, 1.0, pytest.approx(2 / 3))
    assert r.f1 == pytest.approx(0.8, abs=1e-12)


def test_rouge_empty():
    assert rouge_l_f1([], [1, 2]).f1 == 0.0
    assert rouge_l_f1([1], []).f1 == 0.0
    assert rouge_l_f1([], []).f1 == 0.0


def test_lcs_is_subsequence_not_substring():
    assert lcs_length("axbycz", "abc") == 3
    assert lcs_length("abc", "acb") == 2


@given(seqs, seqs)
def test_rouge_symmetric_and_bounded(a, b):
    x, y = rouge_l_f1(a, b), rouge_l_f1(b, a)
    assert x.f1 == pytest.approx(y.f1)
    assert (x.precision, x.recall) == (y.recall, y.precision)
    assert 0.0 <= x.f1 <= 1.0
    if x.precision + x.recall > 0:
        assert x.f1 == pytest.approx(2 * x.precision * x.recall / (x.precision + x.recall))


@settings(max_examples=200)
@given(seqs, seqs)
def test_lcs_matches_exhaustive_oracle(a, b):
    n = lcs_length(a, b)
    assert n == oracle_lcs(a, b)
    assert n <= min(len(a), len(b))


@given(seqs, st.data())
def test_lcs_equals_length_for_subsequence(a, data):
    mask = data.draw(st.lists(st.booleans(), min_size=len(a), max_size=len(a)))
    sub = [x for x, keep in zip(a, mask) if keep]
    assert lcs_length(sub, a) == len(sub)


def test_flops_constant_trace():
    c = attention_flops([7] * 5, d_head=16, n_heads=4, n_layers=4)
    assert c.attn_flops == 4 * 4 * 4 * 16 * 7 * 5
    assert c.kv_bytes_peak == 7 * 4 * 4 * 16 * 2 * 8
    assert c.cumulative_flops == sorted(c.cumulative_flops)


def test_flops_empty_trace():
    c = attention_flops([], 16, 4, 4)
    assert (c.attn_flops, c.kv_bytes_peak, c.cumulative_flops) == (0, 0, [])


def test_flops_half_budget_ratio_tends_to_half():
    # full cache grows T, T+1, ...; a half budget cache holds ceil((T+s)/2)
    t, steps = 64, 20000
    full = [t + s + 1 for s in range(steps)]
    half = [math.ceil((t + s + 1) / 2) for s in range(steps)]
    ratio = attention_flops(half, 16, 4, 4).attn_flops / attention_flops(full, 16, 4, 4).attn_flops
    closed = sum(half) / sum(full)
    assert abs(ratio - closed) < 1e-12
    assert abs(ratio - 0.5) < 1e-3


@given(st.lists(st.integers(0, 500), min_size=1, max_size=50))
def test_flops_monotone(trace):
    cum = attention_flops(trace, 8, 2, 3).cumulative_flops
    assert all(b >= a for a, b in zip(cum, cum[1:]))
