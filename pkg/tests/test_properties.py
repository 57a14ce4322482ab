"""Property-based checks of the invariants that hold for any input."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from mapprune import criteria as C
from mapprune.network import FlopsTable, build_testbed, load, prune_channel, save
from mapprune.oracle import Ranking, rank_from_scores, spearman

layer_scores = st.dictionaries(
    st.integers(0, 4),
    st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=1, max_size=8),
    min_size=1, max_size=4,
)


def as_table(scores):
    return C.SaliencyTable("p", {l: np.array(v) for l, v in scores.items()},
                           {l: np.arange(len(v)) for l, v in scores.items()})


@given(st.integers(2, 40), st.integers(0, 2 ** 32 - 1))
def test_spearman_symmetric_bounded_and_pearson(n, seed):
    rng = np.random.default_rng(seed)
    keys = [(0, i) for i in range(n)]
    a = Ranking([keys[i] for i in rng.permutation(n)])
    b = Ranking([keys[i] for i in rng.permutation(n)])
    s = spearman(a, b)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12
    assert s == spearman(b, a)
    ra = np.array([a.ranks[k] for k in keys], float)
    rb = np.array([b.ranks[k] for k in keys], float)
    assert abs(s - np.corrcoef(ra, rb)[0, 1]) <= 1e-10
    assert spearman(a, a) == 1.0
    assert spearman(a, Ranking(a.order[::-1])) == -1.0


@given(layer_scores, st.randoms(use_true_random=False))
def test_ranking_independent_of_insertion_order(scores, rnd):
    flat = {(l, i): v for l, vals in scores.items() for i, v in enumerate(vals)}
    items = list(flat.items())
    rnd.shuffle(items)
    r1, r2 = rank_from_scores(flat), rank_from_scores(dict(items))
    assert r1.order == r2.order
    assert sorted(r1.ranks.values()) == list(range(1, len(flat) + 1))


@given(layer_scores)
def test_l2_layers_have_unit_norm(scores):
    t = C.normalize(as_table(scores), "l2")
    for l in t.layers:
        n = np.linalg.norm(t.scores[l])
        if np.any(t.raw[l] != 0):
            assert abs(n - 1.0) <= 1e-12
        else:
            assert n == 0.0


@given(layer_scores, st.sampled_from(["l1", "minmax"]))
def test_normalization_preserves_layer_order(scores, kind):
    t = C.normalize(as_table(scores), kind)
    for l in t.layers:
        raw, new = t.raw[l], t.scores[l]
        i, j = np.triu_indices(len(raw), 1)
        assert np.all((raw[i] < raw[j]) <= (new[i] <= new[j]))


@given(layer_scores, st.floats(0.0, 1.0))
def test_flops_shift_keeps_order_within_layer(scores, lam):
    t = C.normalize(as_table(scores), "l2")
    ft = FlopsTable({}, {l: 1e6 * (l + 1) * 7.3 for l in scores}, 0.0)
    r = C.flops_regularize(t, ft, lam)
    for l in t.layers:
        a, b = t.scores[l], r.scores[l]
        i, j = np.triu_indices(len(a), 1)
        # rounding may merge two scores but never swaps them
        assert np.all((a[i] < a[j]) <= (b[i] <= b[j]))
        assert np.all((a[i] > a[j]) <= (b[i] >= b[j]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.data())
def test_prune_equals_gate_zero(seed, data):
    net = build_testbed((1, 8, 8), classes=3, channels=(3, 4), rng=np.random.default_rng(seed))
    layer = data.draw(st.sampled_from(net.conv_layers))
    ch = data.draw(st.integers(0, net.specs[layer].c_out - 1))
    rng = np.random.default_rng(seed + 1)
    x, y = rng.uniform(size=(4, 1, 8, 8)), rng.integers(0, 3, size=4)
    g = np.ones(net.specs[layer].c_out)
    g[ch] = 0.0
    gated = net.forward(x, y, gates={layer: g}).loss
    assert abs(prune_channel(net, layer, ch).forward(x, y).loss - gated) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.lists(st.integers(0, 10), max_size=4))
def test_serialization_round_trip_after_pruning(tmp_path_factory, seed, picks):
    net = build_testbed((1, 8, 8), classes=3, channels=(3, 4), rng=np.random.default_rng(seed))
    for p in picks:
        layer = net.conv_layers[p % 2]
        if net.specs[layer].c_out > 1:
            net = prune_channel(net, layer, p % net.specs[layer].c_out)
    path = tmp_path_factory.mktemp("rt") / "m.prnb"
    save(net, path)
    back = load(path)
    x = np.random.default_rng(seed).uniform(size=(3, 1, 8, 8))
    assert np.array_equal(back.forward(x).logits, net.forward(x).logits)
    for l in net.conv_layers:
        assert np.array_equal(back.channel_ids[l], net.channel_ids[l])
        assert np.array_equal(back.gates[l], net.gates[l])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 5))
def test_accumulator_counts_consistent(seed, batches):
    net = build_testbed((1, 8, 8), classes=3, channels=(3, 4), rng=np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    acc = C.StatsAccumulator(net)
    for _ in range(batches):
        x, y = rng.uniform(size=(3, 1, 8, 8)), rng.integers(0, 3, size=3)
        f = net.forward(x, y)
        acc.update(f, net.backward(f, param_grads=False))
    for st_ in acc.layers.values():
        assert st_.elements == batches * 3 * st_.map_size
        assert np.all((0 <= st_.positive) & (st_.positive <= st_.elements))
        assert np.all(st_.sum_a >= 0) and np.all(st_.sum_a2 >= 0)
