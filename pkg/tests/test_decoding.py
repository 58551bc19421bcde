import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlprefix.decoding import (DecodeConfig, banned_trigram_tokens, beam_search_fn, block_repeat_trigrams,
                                 enumerate_best, greedy_fn, normalized)
from oracles import brute_force_trigram_ban
from toy import table_step_fn, transformer_step_fn

EOS = 2


@pytest.mark.parametrize("seed", range(20))
def test_exhaustive_beam_matches_brute_force_on_random_models(seed):
    cfg = DecodeConfig(beam=3 ** 4, max_len=4, ln_alpha=[0.0, 0.6, 1.0, 2.0][seed % 4])
    step = transformer_step_fn(seed)
    best = enumerate_best(step, cfg, EOS)
    got = beam_search_fn(step, cfg, EOS)
    assert got.tokens == best.tokens
    assert got.score == pytest.approx(best.score, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.7, 1.0]), st.integers(0, 3), st.booleans())
def test_exhaustive_beam_matches_brute_force_property(seed, alpha, min_len, trigram):
    cfg = DecodeConfig(beam=81, max_len=4, ln_alpha=alpha, min_len=min_len, no_repeat_trigram=trigram)
    step = table_step_fn(seed)
    best, got = enumerate_best(step, cfg, EOS), beam_search_fn(step, cfg, EOS)
    assert got.tokens == best.tokens and got.score == pytest.approx(best.score, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(0, 2))
def test_beam_one_is_greedy(seed, max_len, min_len):
    cfg = DecodeConfig(beam=1, max_len=max_len, min_len=min(min_len, max_len))
    step = table_step_fn(seed, vocab=4)
    g, b = greedy_fn(step, cfg, EOS), beam_search_fn(step, cfg, EOS)
    assert g.tokens == b.tokens and g.logprob == pytest.approx(b.logprob)


@pytest.mark.parametrize("alpha", [0.0, 1.0])
@pytest.mark.parametrize("seed", range(15))
def test_beam_five_scores_at_least_greedy(seed, alpha):
    for step in (table_step_fn(seed, vocab=5), transformer_step_fn(seed, vocab=6)):
        greedy = greedy_fn(step, DecodeConfig(beam=1, max_len=6, ln_alpha=alpha), EOS)
        beam = beam_search_fn(step, DecodeConfig(beam=5, max_len=6, ln_alpha=alpha), EOS)
        assert beam.score >= greedy.score - 1e-12


def test_min_len_bans_eos():
    def always_eos(prefixes):
        return np.log(np.tile([0.05, 0.05, 0.9], (len(prefixes), 1)))

    hyp = beam_search_fn(always_eos, DecodeConfig(beam=2, min_len=3, max_len=5), EOS)
    assert len(hyp.tokens) == 3
    assert hyp.n_scored == 4


def test_max_len_forces_finish_without_eos_term():
    def never_eos(prefixes):
        return np.log(np.tile([0.5, 0.5 - 1e-9, 1e-9], (len(prefixes), 1)))

    hyp = beam_search_fn(never_eos, DecodeConfig(beam=2, max_len=3, ln_alpha=1.0), EOS)
    assert len(hyp.tokens) == 3 and hyp.n_scored == 3
    assert hyp.logprob == pytest.approx(3 * np.log(0.5))


def test_normalized_score():
    assert normalized(-6.0, 3, 1.0) == -2.0
    assert normalized(-6.0, 4, 0.0) == -6.0
    assert normalized(-6.0, 4, 0.5) == -3.0


def test_banned_tokens_never_emitted():
    step = table_step_fn(3, vocab=5)
    hyp = beam_search_fn(step, DecodeConfig(beam=3, max_len=5), EOS, banned=(0, 1))
    assert not set(hyp.tokens) & {0, 1}


# ---------------------------------------------------------------- trigrams

def test_trigram_block_rule():
    a, b, c = 5, 6, 7
    logits = np.zeros(10)
    out = block_repeat_trigrams(logits, [a, b, c, a, b])
    assert out[c] == -np.inf and np.isfinite(np.delete(out, c)).all()
    np.testing.assert_array_equal(block_repeat_trigrams(logits, [a]), logits)
    assert logits[c] == 0.0  # input untouched


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=12))
def test_trigram_ban_matches_exhaustive_scan(history):
    assert banned_trigram_tokens(history) == brute_force_trigram_ban(history, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_trigram_blocked_outputs_have_no_repeats(seed):
    step = table_step_fn(seed, vocab=4)
    hyp = beam_search_fn(step, DecodeConfig(beam=4, max_len=10, no_repeat_trigram=True, min_len=10), EOS)
    grams = [tuple(hyp.tokens[i:i + 3]) for i in range(len(hyp.tokens) - 2)]
    assert len(grams) == len(set(grams))


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam=0)
    with pytest.raises(ValueError):
        DecodeConfig(min_len=5, max_len=3)
