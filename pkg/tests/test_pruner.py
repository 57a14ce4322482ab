import numpy as np
import pytest

from mapprune import criteria as C
from mapprune.config import PruneConfig
from mapprune.data import synth_dataset
from mapprune.errors import ConfigError, PruningError
from mapprune.network import FlopsTable, build_testbed, evaluate, flops
from mapprune.pruner import (
    MinibatchStream,
    finetune,
    group_shrink,
    kernel_norms,
    minimum_network,
    regularization_baseline,
    resume,
    run,
)
from mapprune.rng import stream


@pytest.fixture(scope="module")
def data():
    return synth_dataset(4, 16, 8, seed=3), synth_dataset(4, 8, 8, seed=3, split="test")


@pytest.fixture(scope="module")
def trained(data):
    train, _ = data
    net = build_testbed((1, 8, 8), classes=4, channels=(4, 6), rng=stream(3, "init"))
    finetune(net, train, 300, 0.01, seed=3)
    return net


def cfg(**kw):
    base = dict(criterion="taylor", updates_between_prunes=5, lr=1e-3, seed=1)
    base.update(kw)
    if not any(k in kw for k in ("target_maps", "target_flops", "max_iterations", "accuracy_floor")):
        base["max_iterations"] = 3
    return PruneConfig(**base)


def assert_trace_invariants(trace):
    recs = trace.all_records()
    for a, b in zip(recs, recs[1:]):
        assert b.remaining_maps == a.remaining_maps - 1
        assert b.flops < a.flops
        assert b.params < a.params
    for r in recs:
        assert 0.0 <= r.train_accuracy <= 1.0
        assert r.test_accuracy is None or 0.0 <= r.test_accuracy <= 1.0


# -- minibatches / fine-tuning ------------------------------------------------------


def test_minibatch_stream_epochs():
    s = MinibatchStream(10, 3, np.random.default_rng(0))
    first_epoch = np.concatenate([s.next() for _ in range(3)])
    assert len(set(first_epoch.tolist())) == 9  # tail of 1 dropped, no repeats
    s2 = MinibatchStream(10, 3, np.random.default_rng(0))
    np.testing.assert_array_equal(np.concatenate([s2.next() for _ in range(3)]), first_epoch)
    with pytest.raises(ValueError):
        MinibatchStream(0, 3, np.random.default_rng(0))


def test_finetune_zero_updates_is_identity(trained, data):
    net = trained.copy()
    assert finetune(net, data[0], 0, 0.1) == []
    for l, (w, b) in trained.params.items():
        np.testing.assert_array_equal(net.params[l][0].value, w.value)
        np.testing.assert_array_equal(net.params[l][1].value, b.value)


def test_finetune_reproducible(trained, data):
    a, b = trained.copy(), trained.copy()
    la = finetune(a, data[0], 20, 1e-3, seed=9)
    lb = finetune(b, data[0], 20, 1e-3, seed=9)
    assert la == lb and len(la) == 20
    np.testing.assert_array_equal(a.params[0][0].value, b.params[0][0].value)


# -- the pruning loop ---------------------------------------------------------------


def test_weight_criterion_without_updates_is_deterministic(trained, data):
    c = cfg(criterion="weight", updates_between_prunes=0, max_iterations=4)
    _, t1 = run(trained, data[0], c, data[1])
    _, t2 = run(trained, data[0], c, data[1])
    assert t1.to_dict() == t2.to_dict()
    assert_trace_invariants(t1)
    assert len(t1) == 4 and t1.stop_reason == "max_iterations"


@pytest.mark.parametrize("criterion", C.CRITERIA)
def test_every_criterion_runs(trained, data, criterion):
    net, t = run(trained, data[0], cfg(criterion=criterion, max_iterations=2, obd_probes=1), data[1])
    assert len(t) == 2 and net.total_maps() == trained.total_maps() - 2
    assert_trace_invariants(t)


@pytest.mark.parametrize("criterion", ["weight", "taylor"])
def test_dead_channel_is_pruned_first(trained, data, criterion):
    net = trained.copy()
    w, b = net.params[3]
    w.value[2] = 0.0
    b.value[2] = 0.0
    _, t = run(net, data[0], cfg(criterion=criterion, updates_between_prunes=1 if criterion == "taylor" else 0,
                                 lr=0.0, max_iterations=1))
    assert (t.records[0].layer, t.records[0].channel) == (3, 2)


def test_same_seed_bit_identical(trained, data):
    _, a = run(trained, data[0], cfg(), data[1])
    _, b = run(trained, data[0], cfg(), data[1])
    assert a.to_dict() == b.to_dict()


def test_target_flops_stop_semantics(trained, data):
    start = flops(trained).network_total
    target = start * 0.8
    net, t = run(trained, data[0], cfg(target_flops=target), data[1])
    recs = t.all_records()
    assert recs[-1].flops <= target < recs[-2].flops
    assert flops(net).network_total == recs[-1].flops


def test_target_maps_stop(trained, data):
    net, t = run(trained, data[0], cfg(target_maps=7))
    assert net.total_maps() == 7 and t.stop_reason == "target_maps"


def test_accuracy_floor_stop(trained, data):
    _, t = run(trained, data[0], cfg(criterion="random", updates_between_prunes=0, accuracy_floor=0.9), data[1])
    assert t.records[-1].test_accuracy < 0.9
    assert all(r.test_accuracy >= 0.9 for r in t.all_records()[:-1])
    with pytest.raises(ConfigError):
        run(trained, data[0], cfg(accuracy_floor=0.5))


def test_unsatisfiable_targets_rejected_up_front(trained, data):
    assert minimum_network(trained, cfg())[0] == 2
    with pytest.raises(ConfigError, match="target_maps"):
        run(trained, data[0], cfg(target_maps=1))
    with pytest.raises(ConfigError, match="target_flops"):
        run(trained, data[0], cfg(target_flops=1.0))
    with pytest.raises(ConfigError, match="prune_layers"):
        run(trained, data[0], cfg(prune_layers=[1]))


def test_exhaustion_reports_partial_trace(trained, data):
    with pytest.raises(PruningError) as exc:
        run(trained, data[0], cfg(criterion="weight", updates_between_prunes=0, max_iterations=50))
    partial = exc.value.trace
    assert len(partial) == trained.total_maps() - 2
    assert partial.stop_reason == "exhausted"
    assert_trace_invariants(partial)


def test_prune_layers_restricts_choice(trained, data):
    _, t = run(trained, data[0], cfg(prune_layers=[0], max_iterations=3))
    assert {r.layer for r in t.records} == {0}


def test_trace_records_original_channel_ids(trained, data):
    net, t = run(trained, data[0], cfg(max_iterations=5))
    for l in net.conv_layers:
        removed = {r.channel for r in t.records if r.layer == l}
        assert removed.isdisjoint(net.channel_ids[l].tolist())
        assert len(removed) + net.specs[l].c_out == trained.specs[l].c_out


def test_input_network_untouched(trained, data):
    before = trained.params[0][0].value.copy()
    run(trained, data[0], cfg())
    np.testing.assert_array_equal(trained.params[0][0].value, before)


@pytest.mark.parametrize("criterion", ["taylor", "obd", "random"])
def test_checkpoint_resume_matches_straight_run(tmp_path, trained, data, criterion):
    c6 = cfg(criterion=criterion, max_iterations=6, obd_warmup_batches=2)
    _, straight = run(trained, data[0], c6, data[1])
    run(trained, data[0], cfg(criterion=criterion, max_iterations=3, obd_warmup_batches=2), data[1],
        checkpoint_dir=tmp_path)
    net, resumed = resume(tmp_path, data[0], data[1], config=c6)
    assert resumed.to_dict()["rows"] == straight.to_dict()["rows"]
    with pytest.raises(ConfigError):
        resume(tmp_path, data[0], data[1], config=cfg(criterion=criterion, lr=0.5, max_iterations=6))


# -- FLOPs regularisation ordering -----------------------------------------------------


def test_flops_regularization_prunes_expensive_layer_earlier():
    """Two layers with identically distributed scores: the costly one goes first on average."""
    ft = FlopsTable({}, {0: 57.8e6, 1: 1.8e6}, 0.0)
    first_removal = {0: [], 1: []}
    for seed in range(50):
        rng = np.random.default_rng(seed)
        ids = {0: np.arange(8), 1: np.arange(8)}
        raw = {0: rng.uniform(size=8), 1: rng.uniform(size=8)}
        order = []
        while min(len(v) for v in ids.values()) > 1:
            t = C.flops_regularize(C.normalize(C.SaliencyTable("r", raw, ids), "l2"), ft, 1e-3)
            layer, pos, _ = t.argmin()
            order.append(layer)
            raw = {l: (np.delete(v, pos) if l == layer else v) for l, v in raw.items()}
            ids = {l: (np.delete(v, pos) if l == layer else v) for l, v in ids.items()}
        for l in (0, 1):
            first_removal[l].append(np.mean([i for i, x in enumerate(order) if x == l] or [len(order)]))
    assert np.mean(first_removal[0]) < np.mean(first_removal[1])


# -- regularisation baseline -----------------------------------------------------------


def test_baseline_gamma_zero_keeps_everything(trained, data):
    net, t = regularization_baseline(trained, data[0], 0.0, 3, updates=20, lr=1e-3)
    assert net.specs[3].c_out == trained.specs[3].c_out and len(t) == 0
    assert kernel_norms(net, 3).min() > 1e-2


def test_baseline_large_gamma_shrinks_monotonically(trained, data):
    hist = []
    net, t = regularization_baseline(trained, data[0], 5000.0, 3, updates=40, lr=1e-3, norm_history=hist)
    norms = np.array(hist)
    assert np.all(np.diff(norms, axis=0) <= 1e-12)
    assert norms[-1].max() == 0.0
    assert net.specs[3].c_out == 1  # at least one channel survives


def test_baseline_threshold_is_strict(trained, data):
    net = trained.copy()
    w = net.params[3][0].value
    w[1] = 0.0
    w[1, 0, 0, 0] = 1e-5  # norm exactly at the threshold: kept
    w[4] = 0.0
    w[4, 0, 0, 0] = 5e-6  # below: removed
    pruned, t = regularization_baseline(net, data[0], 0.0, 3, threshold=1e-5, updates=0)
    assert [r.channel for r in t.records] == [4]
    assert 1 in pruned.channel_ids[3]


def test_bias_folding_preserves_dense_output(trained, data):
    net = trained.copy()
    w, b = net.params[3]
    w.value[2] = 0.0
    b.value[2] = 0.3  # constant map relu(0.3) feeding the dense layer
    pruned, t = regularization_baseline(net, data[0], 0.0, 3, updates=0)
    assert len(t) == 1
    x = data[0].images[:10]
    np.testing.assert_allclose(pruned.forward(x).logits, net.forward(x).logits, rtol=0, atol=1e-12)


def test_group_shrink_proximal_step():
    net = build_testbed((1, 8, 8), classes=2, channels=(2,), rng=np.random.default_rng(0))
    n0 = kernel_norms(net, 0)
    group_shrink(net, 0, n0[0] / 2)
    np.testing.assert_allclose(kernel_norms(net, 0), [n0[0] / 2, max(0.0, n0[1] - n0[0] / 2)], rtol=1e-12)
