import math

import numpy as np
from hypothesis import given, settings, strategies as st

from loarm import autodiff as ad
from loarm import data as D
from loarm.engine import compress_trace, top_p_filter
from loarm.orders import batched_prefix_log_prob, sample_permutations
from loarm.states import MASK, FlatIndexMap, GraphState, one_hot

finite = st.floats(-20, 20, allow_nan=False)


@given(st.integers(1, 15))
def test_index_map_is_a_bijection(n):
    imap = FlatIndexMap(n)
    assert imap.length == n + n * (n - 1) // 2
    slots = [imap.to_slot(d) for d in range(imap.length)]
    assert len(set(slots)) == imap.length
    assert all(imap.to_dim(s) == d for d, s in enumerate(slots))


@given(st.lists(st.integers(-1, 3), min_size=1, max_size=8))
def test_one_hot_has_one_active_slot(tokens):
    enc = one_hot(np.array(tokens), 4)
    assert np.array_equal(enc.sum(axis=-1), np.ones(len(tokens)))
    assert all(enc[i, 4] == (t == MASK) for i, t in enumerate(tokens))


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10), st.floats(0.01, 1.0))
def test_top_p_keeps_a_minimal_nucleus(weights, p):
    w = np.array(weights)
    if w.sum() <= 0:
        w = np.ones_like(w)
    probs = w / w.sum()
    out = top_p_filter(probs, p)
    kept = out > 0
    assert math.isclose(out.sum(), 1.0, abs_tol=1e-12)
    assert probs[kept].sum() >= p - 1e-9
    # dropping the smallest kept entry would fall below p
    if kept.sum() > 1:
        assert probs[kept].sum() - probs[kept].min() < p + 1e-9
    # every kept category is at least as likely as every dropped one
    if (~kept).any() and (probs[~kept] > 0).any():
        assert probs[kept].min() >= probs[~kept].max()


@given(st.lists(finite, min_size=1, max_size=6), st.data())
def test_masked_log_softmax_normalises(logits, data):
    active = np.array(data.draw(st.lists(st.booleans(), min_size=len(logits), max_size=len(logits))))
    if not active.any():
        active[0] = True
    out = ad.masked_log_softmax(np.array(logits), active)
    assert math.isclose(np.exp(out[active]).sum(), 1.0, abs_tol=1e-12)
    assert np.all(out[~active] == -np.inf)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_prefix_log_probs_are_nested_and_non_positive(L, seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(1, L)) * 3
    order = sample_permutations(g, rng)
    lps = [float(batched_prefix_log_prob(g, order, np.array([n]))[0]) for n in range(L + 1)]
    assert lps[0] == 0.0
    assert all(b <= a + 1e-12 for a, b in zip(lps, lps[1:]))


@settings(max_examples=50)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_graph_records_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    nodes = rng.integers(0, 4, size=n)
    edges = rng.integers(0, 3, size=n * (n - 1) // 2)
    g = GraphState(nodes, edges, np.ones(n, bool), 4, 3)
    line = D.format_graph(g)
    back = D.parse_graph(line, 4, 3)
    assert np.array_equal(back.flat(), g.flat())
    assert D.format_graph(back) == line
    assert np.array_equal(g.adjacency(), g.adjacency().T)


@given(st.text(alphabet="AEN", max_size=30))
def test_compression_is_idempotent_without_repeats(s):
    c = compress_trace(s)
    assert compress_trace(c) == c
    assert all(a != b for a, b in zip(c, c[1:]))
    assert set(c) == set(s)
