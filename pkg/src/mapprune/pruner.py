"""Iterative prune / fine-tune loop and the threshold-regularisation baseline."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import criteria as C
from .config import PruneConfig
from .errors import ConfigError, NumericError, PruningError
from .network import evaluate, flops, flops_for_specs, load, prune_channel, save
from .rng import restore_rng, rng_state, stream
from .tensor import sgd_step
from .trace import PruneRecord, PruneTrace

log = logging.getLogger(__name__)


class MinibatchStream:
    """Endless shuffled minibatches: a fresh permutation per epoch, tail dropped."""

    def __init__(self, n: int, batch_size: int, rng):
        if n < 1:
            raise ValueError("cannot draw minibatches from an empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def finetune(net, dataset, updates: int, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4,
             batches: MinibatchStream | None = None, batch_size: int = 32, seed: int = 0,
             on_batch=None, after_step=None):
    """Run exactly ``updates`` SGD steps; returns the per-step minibatch losses.

    ``on_batch(fwd, back, images, labels)`` sees every minibatch before its
    update (criteria accumulate there); ``after_step(net)`` runs after it.
    """
    if batches is None:
        batches = MinibatchStream(len(dataset), batch_size, stream(seed, "shuffle"))
    params = net.parameters()
    losses = []
    for _ in range(updates):
        idx = batches.next()
        x, y = dataset.images[idx], dataset.labels[idx]
        with np.errstate(over="ignore", invalid="ignore"):
            fwd = net.forward(x, y)
        if not np.isfinite(fwd.loss):
            raise NumericError(f"non-finite training loss {fwd.loss}")
        back = net.backward(fwd)
        if on_batch is not None:
            on_batch(fwd, back, x, y)
        sgd_step(params, lr, momentum, weight_decay)
        net.touch()
        if after_step is not None:
            after_step(net)
        losses.append(fwd.loss)
    return losses


# ---------------------------------------------------------------------------
# helpers


def _record(net, it, layer, channel, score, total, train, test):
    loss, acc = evaluate(net, train.images, train.labels)
    test_acc = evaluate(net, test.images, test.labels)[1] if test is not None else None
    return PruneRecord(it, layer, channel, score, net.total_maps(), 1.0 - net.total_maps() / total,
                       flops(net).network_total, net.param_count(), loss, acc, test_acc)


def _prunable(net, config):
    return [l for l in net.conv_layers if config.prune_layers is None or l in config.prune_layers]


def minimum_network(net, config):
    """(maps, flops) left once every prunable layer is down to one channel."""
    layers = _prunable(net, config)
    active = {l: 1 for l in layers}
    maps = sum(1 if l in layers else net.specs[l].c_out for l in net.conv_layers)
    return maps, flops_for_specs(net.input_shape, net.specs, active).network_total


def check_feasible(net, config: PruneConfig):
    if config.prune_layers is not None:
        bad = [l for l in config.prune_layers if l not in net.conv_layers]
        if bad:
            raise ConfigError(f"prune.prune_layers: {bad} are not conv layers")
    min_maps, min_flops = minimum_network(net, config)
    if config.target_maps is not None and config.target_maps < min_maps:
        raise ConfigError(f"prune.target_maps: {config.target_maps} is below the network minimum {min_maps}")
    if config.target_flops is not None and config.target_flops < min_flops:
        raise ConfigError(f"prune.target_flops: {config.target_flops} is below the network minimum {min_flops}")


class _CriterionState:
    """Everything a criterion carries across and within pruning iterations."""

    def __init__(self, net, config: PruneConfig, train):
        self.config = config
        self.train = train
        self.acc = None
        self.obd = None
        self.probe_rng = stream(config.seed, "probes")
        self.random_draw = 0
        if config.criterion == "obd":
            self.obd = C.GateHessianEstimator(net, ema=config.obd_ema, warmup=config.obd_warmup_batches)

    def warm_start(self, net, batches):
        """Initial OBD estimate before the first pruning iteration (no parameter updates)."""
        if self.obd is None:
            return
        for _ in range(self.config.obd_warmup_batches):
            idx = batches.next()
            self.obd.update(net, self.train.images[idx], self.train.labels[idx], self.probe_rng,
                            self.config.obd_probes)

    def begin(self, net):
        crit = self.config.criterion
        if crit not in C.DATA_FREE and crit != "obd":
            self.acc = C.StatsAccumulator(net, track_examples=crit == "mutual_info")

    def on_batch(self, net):
        needs_back = self.config.criterion in ("taylor", "taylor_activation")

        def hook(fwd, back, x, y):
            if self.acc is not None:
                self.acc.update(fwd, back if needs_back else None)
            if self.obd is not None:
                self.obd.update(net, x, y, self.probe_rng, self.config.obd_probes)
        return hook

    def table(self, net) -> C.SaliencyTable:
        crit = self.config.criterion
        if crit == "weight":
            t = C.weight_criterion(net)
        elif crit == "random":
            t = C.random_criterion(net, self.config.seed, self.random_draw)
            self.random_draw += 1
        elif crit == "obd":
            t = self.obd.table()
        elif crit == "taylor":
            t = C.taylor_criterion(self.acc)
        elif crit == "mutual_info":
            t = C.mutual_info_criterion(self.acc, self.config.mi_bins, self.train.class_count)
        elif crit == "taylor_activation":
            tay = C.normalize(C.taylor_criterion(self.acc), "l2")
            act = C.normalize(C.activation_criteria(self.acc)[0], "l2")
            t = C.combine(tay, act, self.config.combine_lambda)
        else:
            mean, std, apoz = C.activation_criteria(self.acc)
            t = {"activation_mean": mean, "activation_std": std, "apoz": apoz}[crit]
        if crit != "taylor_activation":
            t = C.normalize(t, self.config.normalization)
        if self.config.flops_lambda:
            t = C.flops_regularize(t, flops(net), self.config.flops_lambda, self.config.flops_unit)
        return t

    def removed(self, layer, position):
        if self.obd is not None:
            self.obd.remove_channel(layer, position)


def _stop_reached(config, net, trace):
    rule, value = config.stop_rule
    last = trace.records[-1] if trace.records else trace.initial
    if rule == "target_maps":
        return net.total_maps() <= value
    if rule == "target_flops":
        return flops(net).network_total <= value
    if rule == "max_iterations":
        return len(trace) >= value
    return last.test_accuracy is not None and last.test_accuracy < value


def run(net, train, config: PruneConfig, test=None, checkpoint_dir=None):
    """Alternate fine-tuning and single-map removal until the stop rule holds.

    Each iteration: (a) ``updates_between_prunes`` SGD steps, accumulating the
    criterion on those minibatches; (b) build, normalise and optionally
    FLOPs-regularise the saliency table; (c) structurally remove the globally
    least salient map; (d) log. Returns ``(pruned_net, trace)``.

    With ``checkpoint_dir`` set, a resumable checkpoint is written after every
    iteration (see :func:`resume`).
    """
    check_feasible(net, config)
    if config.accuracy_floor is not None and test is None:
        raise ConfigError("prune.accuracy_floor needs a test split")
    net = net.copy()
    trace = PruneTrace(_record(net, 0, None, None, None, net.total_maps(), train, test),
                       config=config.model_dump(mode="json"))
    batches = MinibatchStream(len(train), config.batch_size, stream(config.seed, "shuffle"))
    state = _CriterionState(net, config, train)
    state.warm_start(net, batches)
    return _loop(net, train, test, config, trace, batches, state, checkpoint_dir)


def _loop(net, train, test, config, trace, batches, state, checkpoint_dir):
    total = trace.initial.remaining_maps
    layers = _prunable(net, config)
    while not _stop_reached(config, net, trace):
        state.begin(net)
        finetune(net, train, config.updates_between_prunes, config.lr, config.momentum,
                 config.weight_decay, batches=batches, on_batch=state.on_batch(net))
        table = state.table(net)
        pick = table.argmin(layers)
        if pick is None:
            trace.stop_reason = "exhausted"
            raise PruningError("no prunable feature maps left before the stop rule was met", trace)
        layer, pos, score = pick
        cid = int(net.channel_ids[layer][pos])
        net = prune_channel(net, layer, pos)
        state.removed(layer, pos)
        trace.append(_record(net, len(trace) + 1, layer, cid, float(score), total, train, test))
        log.debug("pruned layer %d channel %d (score %.4g)", layer, cid, score)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, net, trace, batches, state)
    trace.stop_reason = config.stop_rule[0]
    return net, trace


# ---------------------------------------------------------------------------
# checkpoints: model file + trace + RNG / estimator state


def save_checkpoint(directory, net, trace, batches, state):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save(net, d / "model.prnb")
    trace.to_json(d / "trace.json")
    doc = {
        "shuffle_rng": rng_state(batches.rng),
        "perm": batches._perm.tolist(),
        "pos": batches._pos,
        "probe_rng": rng_state(state.probe_rng),
        "random_draw": state.random_draw,
    }
    if state.obd is not None:
        est = state.obd.estimate
        doc["obd"] = {"diag": [float(v) for v in est.diag], "count": est.count, "skipped": est.skipped,
                      "channel_ids": {str(l): c.tolist() for l, c in state.obd.channel_ids.items()}}
    (d / "state.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def resume(directory, train, test=None, config: PruneConfig | None = None, checkpoint_dir=None):
    """Continue a checkpointed run; ``config`` may replace the stop rule, nothing else."""
    d = Path(directory)
    net = load(d / "model.prnb")
    trace = PruneTrace.from_dict(json.loads((d / "trace.json").read_text()))
    doc = json.loads((d / "state.json").read_text())
    saved = PruneConfig(**trace.config)
    if config is None:
        config = saved
    else:
        stops = ("target_maps", "target_flops", "max_iterations", "accuracy_floor")
        a = saved.model_dump(exclude=set(stops))
        b = config.model_dump(exclude=set(stops))
        if a != b:
            raise ConfigError("resume: only the stop rule may differ from the checkpointed config")
        trace.config = config.model_dump(mode="json")
    batches = MinibatchStream(len(train), config.batch_size, restore_rng(doc["shuffle_rng"]))
    batches._perm = np.asarray(doc["perm"], dtype=np.int64)
    batches._pos = doc["pos"]
    state = _CriterionState(net, config, train)
    state.probe_rng = restore_rng(doc["probe_rng"])
    state.random_draw = doc["random_draw"]
    if state.obd is not None:
        o = doc["obd"]
        state.obd.estimate.diag = np.asarray(o["diag"], dtype=np.float64)
        state.obd.estimate.count = o["count"]
        state.obd.estimate.skipped = o["skipped"]
        state.obd.channel_ids = {int(l): np.asarray(c, dtype=np.int64) for l, c in o["channel_ids"].items()}
    return _loop(net, train, test, config, trace, batches, state, checkpoint_dir)


# ---------------------------------------------------------------------------
# threshold-regularisation baseline


def kernel_norms(net, layer) -> np.ndarray:
    w = net.params[layer][0].value
    return np.sqrt(np.square(w).reshape(w.shape[0], -1).sum(axis=1))


def group_shrink(net, layer, amount: float):
    """Proximal step of ``amount * sum_k ||w_k||``: scale each kernel stack toward zero."""
    w = net.params[layer][0].value
    norms = kernel_norms(net, layer)
    scale = np.where(norms > 0, np.maximum(0.0, 1.0 - amount / np.where(norms > 0, norms, 1.0)), 0.0)
    w *= scale[:, None, None, None]


def _fold_bias(net, layer, pos):
    """Push the constant output relu(b) of a zero-kernel channel into the consumer's bias.

    Exact for a dense consumer; for a conv consumer it is exact away from the
    zero-padded border.
    """
    from .network import _consumer

    b = max(0.0, float(net.params[layer][1].value[pos]))
    if b == 0.0:
        return
    consumer, block = _consumer(net, layer)
    cw, cb = net.params[consumer]
    if net.specs[consumer].kind == "conv2d":
        cb.value += b * cw.value[:, pos].sum(axis=(1, 2))
    else:
        cb.value += b * cw.value[:, pos * block:(pos + 1) * block].sum(axis=1)


def regularization_baseline(net, train, gamma: float, layer: int, threshold: float = 1e-5,
                            updates: int = 300, lr: float = 1e-4, momentum: float = 0.9,
                            weight_decay: float = 1e-4, batch_size: int = 32, seed: int = 0, test=None,
                            norm_history: list | None = None):
    """Fine-tune with an extra group-norm penalty on one layer, then drop small kernels.

    After each SGD step every kernel stack of ``layer`` is shrunk by the
    proximal operator of ``lr * gamma * ||w_k||``. Afterwards channels with
    kernel norm strictly below ``threshold`` are removed one at a time, their
    (rectified) bias folded into the next layer; at least one channel stays.
    """
    net = net.copy()
    total = net.total_maps()
    batches = MinibatchStream(len(train), batch_size, stream(seed, "shuffle"))

    def after(n):
        if gamma:
            group_shrink(n, layer, lr * gamma)
        if norm_history is not None:
            norm_history.append(kernel_norms(n, layer))

    finetune(net, train, updates, lr, momentum, weight_decay, batches=batches, after_step=after)
    trace = PruneTrace(_record(net, 0, None, None, None, total, train, test),
                       config={"gamma": gamma, "threshold": threshold, "updates": updates, "layer": layer})
    while net.specs[layer].c_out > 1:
        norms = kernel_norms(net, layer)
        below = np.flatnonzero(norms < threshold)
        if below.size == 0:
            break
        if below.size == norms.size:
            below = np.delete(below, np.argmax(norms[below]))
        pos = int(below[np.argmin(norms[below])])
        cid = int(net.channel_ids[layer][pos])
        _fold_bias(net, layer, pos)
        net = prune_channel(net, layer, pos)
        trace.append(_record(net, len(trace) + 1, layer, cid, float(norms[pos]), total, train, test))
    trace.stop_reason = "threshold"
    return net, trace
