"""Query sampling/log-prob oracles, response draws, synthetic pools, dataset IO."""

import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markovtyper import simulator
from markovtyper.errors import ConfigurationError, DataError
from markovtyper.simulator import (
    QUERY_PROB_FLOOR,
    ResponsePool,
    SynthConfig,
    derived_rng,
    draw_responses,
    load_pools,
    query_log_prob,
    query_log_prob_grad,
    sample_query,
    save_pools,
    synth_pools,
)

from helpers import numeric_gradient


def ordered_draw_prob(belief, query):
    """Direct sequential-draw probability; independent of query_log_prob."""
    m = np.maximum(np.asarray(belief, dtype=np.float64), QUERY_PROB_FLOOR)
    remaining = m.sum()
    prob = 1.0
    for sym in query:
        prob *= m[sym] / remaining
        remaining -= m[sym]
    return prob


# ---------------------------------------------------------------------------
# sample_query
# ---------------------------------------------------------------------------


def test_query_exhausts_alphabet():
    rng = derived_rng(0, 0)
    belief = np.full(6, 1 / 6)
    q = sample_query(belief, 6, rng)
    assert sorted(q.tolist()) == list(range(6))


def test_one_hot_belief_selects_its_symbol():
    belief = np.zeros(8)
    belief[3] = 1.0
    rng = derived_rng(1, 0)
    # floored mass elsewhere is ~7e-6 total; 100 seeded draws all pick 3
    for _ in range(100):
        assert sample_query(belief, 1, rng)[0] == 3


def test_query_too_long_rejected():
    with pytest.raises(ConfigurationError, match="exceeds"):
        sample_query(np.full(4, 0.25), 5, derived_rng(0, 0))


def test_inclusion_frequency_matches_enumeration():
    # A=4, K=2: exact inclusion probability of symbol 0 from all ordered pairs
    belief = np.array([0.4, 0.3, 0.2, 0.1])
    exact = sum(
        ordered_draw_prob(belief, pair)
        for pair in itertools.permutations(range(4), 2)
        if 0 in pair
    )
    rng = derived_rng(2, 0)
    n = 100_000
    hits = 0
    for _ in range(n):
        hits += 0 in sample_query(belief, 2, rng)
    freq = hits / n
    se = math.sqrt(exact * (1 - exact) / n)
    assert abs(freq - exact) < 3 * se


def test_ordered_query_frequency_matches_log_prob():
    # every ordered query's empirical frequency vs exp(query_log_prob)
    belief = np.array([0.5, 0.2, 0.3])
    rng = derived_rng(3, 0)
    n = 60_000
    counts = {}
    for _ in range(n):
        q = tuple(sample_query(belief, 2, rng).tolist())
        counts[q] = counts.get(q, 0) + 1
    for pair in itertools.permutations(range(3), 2):
        p = math.exp(query_log_prob(belief, np.array(pair)))
        freq = counts.get(pair, 0) / n
        se = math.sqrt(p * (1 - p) / n)
        assert abs(freq - p) < 3 * se, (pair, freq, p)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=2, max_size=10),
    st.integers(min_value=1, max_value=10),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_query_invariants_random_beliefs(weights, k, seed):
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    belief = np.full(weights.size, 1 / weights.size) if total == 0 else weights / total
    k = min(k, belief.size)
    q = sample_query(belief, k, derived_rng(seed, 0))
    assert q.size == k
    assert len(set(q.tolist())) == k
    assert q.min() >= 0 and q.max() < belief.size


def test_sampling_deterministic_with_seed():
    belief = np.array([0.25, 0.25, 0.3, 0.2])
    a = [sample_query(belief, 2, derived_rng(9, 4)).tolist() for _ in range(5)]
    b = [sample_query(belief, 2, derived_rng(9, 4)).tolist() for _ in range(5)]
    assert a == b


# ---------------------------------------------------------------------------
# query_log_prob
# ---------------------------------------------------------------------------


def test_log_prob_uniform_single():
    belief = np.full(28, 1 / 28)
    assert query_log_prob(belief, np.array([7])) == pytest.approx(math.log(1 / 28), abs=1e-9)


def test_log_prob_direct_formula():
    belief = np.array([0.5, 0.3, 0.2])
    expected = math.log(0.5) + math.log(0.3 / 0.5)
    assert query_log_prob(belief, np.array([0, 1])) == pytest.approx(expected, abs=1e-12)


def test_log_prob_rejects_repeats():
    with pytest.raises(ValueError, match="repeated"):
        query_log_prob(np.full(4, 0.25), np.array([1, 1]))


def test_log_prob_normalizes_over_ordered_queries():
    # A=4, K=2: sum over all 12 ordered queries of exp(log prob) == 1
    for belief in (np.array([0.4, 0.3, 0.2, 0.1]), np.array([0.97, 0.01, 0.01, 0.01])):
        total = sum(
            math.exp(query_log_prob(belief, np.array(pair)))
            for pair in itertools.permutations(range(4), 2)
        )
        assert total == pytest.approx(1.0, abs=1e-9)


def test_log_prob_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for trial in range(5):
        raw = rng.uniform(0.05, 1.0, size=5)
        belief = raw / raw.sum()
        query = rng.permutation(5)[:3]
        analytic = query_log_prob_grad(belief, query)
        numeric = numeric_gradient(lambda: query_log_prob(belief, query), belief, step=1e-7)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_log_prob_gradient_zero_at_floored_entries():
    belief = np.array([0.0, 0.2, 0.8])
    grad = query_log_prob_grad(belief, np.array([1]))
    assert grad[0] == 0.0  # below the floor, max() kills the derivative


# ---------------------------------------------------------------------------
# draw_responses
# ---------------------------------------------------------------------------


def _constant_pool(t_value=1.0, n_value=-1.0, counts=(3, 4)):
    target = np.full((counts[0], 2, 4), t_value, dtype=np.float32)
    for i in range(counts[0]):
        target[i] += i  # distinguishable items
    nontarget = np.full((counts[1], 2, 4), n_value, dtype=np.float32)
    for i in range(counts[1]):
        nontarget[i] -= i
    return ResponsePool(target, nontarget)


def test_draw_responses_target_absent():
    pool = _constant_pool()
    rng = derived_rng(0, 0)
    out = draw_responses(np.array([0, 1, 2]), target=5, pool=pool, rng=rng)
    assert np.all(out <= -1.0 + 1e-6)  # all rows from the nontarget pool


def test_draw_responses_single_target_item():
    target = np.arange(8, dtype=np.float32).reshape(1, 2, 4)
    pool = ResponsePool(target, np.zeros((3, 2, 4), dtype=np.float32))
    out = draw_responses(np.array([2, 4]), target=4, pool=pool, rng=derived_rng(1, 0))
    np.testing.assert_array_equal(out[1], target[0])


def test_draw_responses_uniform_over_target_items():
    pool = _constant_pool(counts=(4, 2))
    rng = derived_rng(2, 0)
    n = 10_000
    counts = np.zeros(4)
    for _ in range(n):
        out = draw_responses(np.array([3, 0]), target=3, pool=pool, rng=rng)
        item = int(round(float(out[0, 0, 0]) - 1.0))
        counts[item] += 1
    expected = n / 4
    se = math.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - expected) < 3 * se)


# ---------------------------------------------------------------------------
# synth_pools
# ---------------------------------------------------------------------------


def test_synth_zero_separation_identical_distributions():
    cfg = SynthConfig(channels=4, samples=16, separation=0.0,
                      count_target=500, count_nontarget=500, seed=3)
    pool = synth_pools(cfg)
    mask = simulator.synth_pattern_mask(4, 16)
    t_mean = pool.target[:, mask].mean()
    n_mean = pool.nontarget[:, mask].mean()
    n_elem = 500 * int(mask.sum())
    se = math.sqrt(2.0 / n_elem)
    assert abs(t_mean - n_mean) < 3 * se


def test_synth_delta3_threshold_separates():
    # closed-form check: the affected-channel mean splits the classes with
    # error below 5% at separation 3 (c=4, f=16)
    cfg = SynthConfig(channels=4, samples=16, separation=3.0,
                      count_target=2000, count_nontarget=2000, seed=4)
    pool = synth_pools(cfg)
    affected = pool.target[:, :2, :].mean(axis=(1, 2))
    clean = pool.nontarget[:, :2, :].mean(axis=(1, 2))
    thresh = 0.5 * (affected.mean() + clean.mean())
    err = 0.5 * ((affected < thresh).mean() + (clean >= thresh).mean())
    assert err < 0.05
    # analytic overlap: shift = delta * (affected pattern elems) / block size
    mask = simulator.synth_pattern_mask(4, 16)
    shift = 3.0 * mask[:2].sum() / (2 * 16)
    sep_sd = shift * math.sqrt(2 * 16)
    analytic_err = 0.5 * math.erfc(sep_sd / 2 / math.sqrt(2))
    assert analytic_err < 0.05


def test_synth_deterministic():
    cfg = SynthConfig(channels=2, samples=8, separation=1.0, count_target=10,
                      count_nontarget=12, seed=11)
    a, b = synth_pools(cfg), synth_pools(cfg)
    assert a.target.tobytes() == b.target.tobytes()
    assert a.nontarget.tobytes() == b.nontarget.tobytes()


def test_synth_config_validation():
    with pytest.raises(ConfigurationError):
        SynthConfig(channels=2, samples=8, separation=-0.5)
    with pytest.raises(ConfigurationError):
        SynthConfig(channels=2, samples=8, separation=1.0, count_target=0)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------


def test_pool_round_trip(tmp_path):
    pool = synth_pools(SynthConfig(channels=3, samples=12, separation=2.0,
                                   count_target=7, count_nontarget=9, seed=0))
    save_pools(pool, tmp_path)
    loaded = load_pools(tmp_path)
    assert loaded.target.tobytes() == pool.target.tobytes()
    assert loaded.nontarget.tobytes() == pool.nontarget.tobytes()


def test_pool_manifest_count_too_large(tmp_path):
    pool = synth_pools(SynthConfig(channels=2, samples=4, separation=0.0,
                                   count_target=3, count_nontarget=3, seed=0))
    save_pools(pool, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["count_target"] = 5
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="target_file"):
        load_pools(tmp_path)


def test_pool_truncated_blob(tmp_path):
    pool = synth_pools(SynthConfig(channels=2, samples=4, separation=0.0,
                                   count_target=3, count_nontarget=3, seed=0))
    save_pools(pool, tmp_path)
    raw = (tmp_path / "nontarget.bin").read_bytes()
    (tmp_path / "nontarget.bin").write_bytes(raw[:-4])
    with pytest.raises(DataError, match="nontarget_file"):
        load_pools(tmp_path)


def test_pool_nonfinite_rejected(tmp_path):
    pool = synth_pools(SynthConfig(channels=2, samples=4, separation=0.0,
                                   count_target=3, count_nontarget=3, seed=0))
    bad = pool.target.copy()
    bad[0, 0, 0] = np.inf
    arr = np.ascontiguousarray(bad, dtype="<f4")
    save_pools(pool, tmp_path)
    (tmp_path / "target.bin").write_bytes(arr.tobytes())
    with pytest.raises(DataError, match="non-finite"):
        load_pools(tmp_path)


def test_pool_missing_manifest_field(tmp_path):
    pool = synth_pools(SynthConfig(channels=2, samples=4, separation=0.0,
                                   count_target=3, count_nontarget=3, seed=0))
    save_pools(pool, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    del manifest["channels"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DataError, match="channels"):
        load_pools(tmp_path)


def test_pool_split_holds_out_items():
    pool = synth_pools(SynthConfig(channels=2, samples=4, separation=0.0,
                                   count_target=20, count_nontarget=30, seed=0))
    main, held = pool.split(0.1, derived_rng(0, 0))
    assert held.target.shape[0] == 2
    assert held.nontarget.shape[0] == 3
    assert main.target.shape[0] == 18
    assert main.nontarget.shape[0] == 27
