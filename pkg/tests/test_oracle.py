import csv

import numpy as np
import pytest

from mapprune.errors import ShapeError
from mapprune.network import FLATTEN, RELU, LayerSpec, Network, build_testbed, evaluate
from mapprune.oracle import (
    Ranking,
    compute_oracle,
    layer_rank_stats,
    oracle_scores,
    oracle_trajectory,
    per_layer_spearman,
    rank_from_scores,
    spearman,
    write_oracle_csv,
)
from mapprune.tensor import softmax_cross_entropy


@pytest.fixture
def net_xy():
    net = build_testbed((1, 8, 8), classes=3, channels=(3, 4), rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    return net, rng.uniform(size=(20, 1, 8, 8)), rng.integers(0, 3, size=20)


def test_oracle_record_invariants(net_xy):
    net, x, y = net_xy
    recs = compute_oracle(net, x, y)
    assert len(recs) == net.total_maps()
    for r in recs:
        assert r.abs_delta_loss == abs(r.delta_loss) >= 0.0


def test_oracle_restores_gates_and_is_deterministic(net_xy):
    net, x, y = net_xy
    before = {l: g.copy() for l, g in net.gates.items()}
    a = compute_oracle(net, x, y)
    b = compute_oracle(net, x, y)
    assert a == b
    for l in net.conv_layers:
        np.testing.assert_array_equal(net.gates[l], before[l])
    assert evaluate(net, x, y)[0] == a[0].base_loss


def test_dead_channel_oracle_is_exactly_zero(net_xy):
    net, x, y = net_xy
    w, b = net.params[0]
    w.value[1] = 0.0
    b.value[1] = -1.0
    recs = compute_oracle(net, x, y)
    dead = [r for r in recs if (r.layer, r.channel) == (0, 1)][0]
    assert dead.delta_loss == 0.0


def test_oracle_two_channel_hand_computation():
    """Direct re-evaluation: drop the channel's dense columns by hand."""
    specs = [LayerSpec.conv(1, 2, 1), RELU, FLATTEN, LayerSpec.dense(8, 2)]
    net = Network.initialize((1, 2, 2), specs, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    x, y = rng.uniform(size=(6, 1, 2, 2)), rng.integers(0, 2, size=6)
    w, b = net.params[0][0].value[:, 0, 0, 0], net.params[0][1].value
    dw, db = net.params[3][0].value, net.params[3][1].value

    def loss(keep):
        h = np.maximum(0.0, x[:, 0][:, None] * w[None, :, None, None] + b[None, :, None, None])
        h = h * np.asarray(keep)[None, :, None, None]
        return softmax_cross_entropy(h.reshape(6, -1) @ dw.T + db, y)[0]

    base = loss([1, 1])
    recs = compute_oracle(net, x, y)
    assert recs[0].delta_loss == pytest.approx(loss([0, 1]) - base, abs=1e-12)
    assert recs[1].delta_loss == pytest.approx(loss([1, 0]) - base, abs=1e-12)


def test_oracle_scores_modes(net_xy):
    net, x, y = net_xy
    recs = compute_oracle(net, x, y)
    assert set(oracle_scores(recs, "loss")) == set(oracle_scores(recs, "abs"))
    with pytest.raises(ValueError):
        oracle_scores(recs, "squared")


# -- rankings ------------------------------------------------------------------


def test_rank_from_scores_example():
    r = rank_from_scores({(0, 1): 0.1, (0, 2): 0.9, (0, 3): 0.5})
    assert r.ranks == {(0, 2): 1, (0, 3): 2, (0, 1): 3}


def test_rank_ties_and_order_independence():
    keys = [(1, 0), (0, 2), (0, 0), (1, 1)]
    r = rank_from_scores({k: 0.0 for k in keys})
    assert r.order == sorted(keys)
    scores = {k: float(i % 2) for i, k in enumerate(keys)}
    shuffled = dict(reversed(list(scores.items())))
    assert rank_from_scores(scores).order == rank_from_scores(shuffled).order


def test_ranking_rejects_duplicates():
    with pytest.raises(ValueError):
        Ranking([(0, 0), (0, 0)])


def test_spearman_identity_and_reverse():
    keys = [(0, i) for i in range(3)]
    a = Ranking(keys)
    assert spearman(a, a) == 1.0
    assert spearman(a, Ranking(keys[::-1])) == -1.0


def test_spearman_matches_pearson_on_ranks():
    rng = np.random.default_rng(0)
    keys = [(0, i) for i in range(50)]
    for _ in range(200):
        pa, pb = rng.permutation(50), rng.permutation(50)
        a, b = Ranking([keys[i] for i in pa]), Ranking([keys[i] for i in pb])
        ra = np.array([a.ranks[k] for k in keys], dtype=float)
        rb = np.array([b.ranks[k] for k in keys], dtype=float)
        assert abs(spearman(a, b) - np.corrcoef(ra, rb)[0, 1]) <= 1e-10
        assert spearman(a, b) == spearman(b, a)


def test_spearman_errors():
    with pytest.raises(ShapeError):
        spearman(Ranking([(0, 0), (0, 1)]), Ranking([(0, 0), (0, 2)]))
    with pytest.raises(ShapeError):
        spearman(Ranking([(0, 0)]), Ranking([(0, 0)]))


def test_per_layer_spearman_skips_singletons():
    a = {(0, 0): 1.0, (0, 1): 2.0, (1, 0): 5.0}
    assert per_layer_spearman(a, a) == {0: 1.0}


def test_layer_rank_stats():
    single = layer_rank_stats(Ranking([(0, i) for i in range(5)]))
    assert single[0]["min"] == 1 and single[0]["max"] == 5
    two = layer_rank_stats(Ranking([(0, 0), (0, 1), (1, 0), (1, 1)]))
    assert two[0]["median"] == 1.5 and two[1]["median"] == 3.5


def test_layer_rank_stats_bounds(net_xy):
    net, x, y = net_xy
    r = rank_from_scores(oracle_scores(compute_oracle(net, x, y), "abs"))
    stats = layer_rank_stats(r, net)
    for s in stats.values():
        assert 1 <= s["min"] <= s["median"] <= s["max"] <= len(r)


# -- trajectories ------------------------------------------------------------------


def test_trajectory_basics(net_xy):
    net, x, y = net_xy
    r = rank_from_scores(oracle_scores(compute_oracle(net, x, y), "abs"))
    t = oracle_trajectory(net, r, x, y, removals=4)
    assert len(t) == 4
    assert t.initial.train_accuracy == evaluate(net, x, y)[1]
    assert [rec.remaining_maps for rec in t.records] == [6, 5, 4, 3]
    assert net.total_maps() == 7  # the input network is untouched
    t0 = oracle_trajectory(net, r, x, y, removals=0)
    assert len(t0) == 0


def test_trajectory_skips_last_channel(net_xy):
    net, x, y = net_xy
    # rank every layer-0 channel as least important: only two of three can go
    order = [(3, i) for i in range(4)] + [(0, i) for i in range(3)]
    t = oracle_trajectory(net, Ranking(order), x, y, removals=3)
    assert [(rec.layer, rec.channel) for rec in t.records] == [(0, 2), (0, 1), (3, 3)]


def test_oracle_csv(tmp_path, net_xy):
    net, x, y = net_xy
    recs = compute_oracle(net, x, y)
    write_oracle_csv(tmp_path / "o.csv", recs)
    with open(tmp_path / "o.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["layer", "channel", "delta_loss", "abs_delta_loss", "global_rank_loss", "global_rank_abs"]
    assert len(rows) == 1 + net.total_maps()
    assert sorted(int(r[5]) for r in rows[1:]) == list(range(1, net.total_maps() + 1))
