"""Feature-map saliency criteria.

Every criterion produces a :class:`SaliencyTable`: per conv layer, one score
per surviving channel, keyed by the channel's original id. Higher scores mean
more important; the pruner removes the global minimum.

Data-dependent criteria read a :class:`StatsAccumulator` that is fed the
forward (and, for Taylor, backward) results of the fine-tuning minibatches.
Activation statistics are taken on the post-ReLU output of each conv layer.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError
from .rng import stream

log = logging.getLogger(__name__)

NORMALIZATIONS = ("none", "l1", "l2", "minmax")
DATA_FREE = ("weight", "random")
CRITERIA = (
    "weight", "activation_mean", "activation_std", "apoz", "taylor",
    "obd", "mutual_info", "random", "taylor_activation",
)


@dataclass
class SaliencyTable:
    criterion: str
    raw: dict  # layer -> raw scores, ordered like channel_ids[layer]
    channel_ids: dict  # layer -> original channel ids
    scores: dict = None  # layer -> current (normalised / regularised) scores
    normalization: str = "none"
    flops_lambda: float = 0.0

    def __post_init__(self):
        self.raw = {l: np.asarray(v, dtype=np.float64) for l, v in self.raw.items()}
        if self.scores is None:
            self.scores = {l: v.copy() for l, v in self.raw.items()}
        for l in self.raw:
            if not (len(self.raw[l]) == len(self.scores[l]) == len(self.channel_ids[l])):
                raise ShapeError(f"layer {l}: score and channel-id lengths differ")

    @property
    def normalized(self) -> bool:
        return self.normalization != "none"

    @property
    def layers(self):
        return sorted(self.scores)

    def as_dict(self, raw: bool = False) -> dict:
        """``{(layer, channel_id): score}``."""
        src = self.raw if raw else self.scores
        return {(l, int(c)): float(s) for l in self.layers for c, s in zip(self.channel_ids[l], src[l])}

    def layer_dict(self, layer, raw: bool = False) -> dict:
        src = self.raw if raw else self.scores
        return {(layer, int(c)): float(s) for c, s in zip(self.channel_ids[layer], src[layer])}

    def replace(self, scores, **changes) -> "SaliencyTable":
        kw = dict(criterion=self.criterion, raw=self.raw, channel_ids=self.channel_ids,
                  normalization=self.normalization, flops_lambda=self.flops_lambda)
        kw.update(changes)
        return SaliencyTable(scores={l: np.asarray(v, dtype=np.float64) for l, v in scores.items()}, **kw)

    def argmin(self, layers=None, min_channels: int = 2):
        """``(layer, position, score)`` of the globally least salient channel.

        Only layers with at least ``min_channels`` channels are eligible; ties
        go to the lowest (layer, channel id).
        """
        best = None
        for l in self.layers:
            if layers is not None and l not in layers:
                continue
            if len(self.scores[l]) < min_channels:
                continue
            for pos, (cid, s) in enumerate(zip(self.channel_ids[l], self.scores[l])):
                key = (s, l, int(cid))
                if best is None or key < best[0]:
                    best = (key, l, pos)
        if best is None:
            return None
        return best[1], best[2], best[0][0]

    def to_csv(self, path):
        from .oracle import rank_from_scores

        ranking = rank_from_scores(self.as_dict())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "channel", "raw_score", "normalized_score", "rank"])
            for l in self.layers:
                for cid, r, s in zip(self.channel_ids[l], self.raw[l], self.scores[l]):
                    w.writerow([l, int(cid), repr(float(r)), repr(float(s)), ranking.ranks[(l, int(cid))]])


def _ids(net):
    return {l: net.channel_ids[l].copy() for l in net.conv_layers}


# ---------------------------------------------------------------------------
# statistics accumulation


@dataclass
class _LayerStats:
    channels: int
    map_size: int
    sum_a: np.ndarray = None
    sum_a2: np.ndarray = None
    positive: np.ndarray = None
    elements: int = 0
    taylor_sum: np.ndarray = None
    taylor_examples: int = 0
    example_means: list = field(default_factory=list)

    def __post_init__(self):
        z = np.zeros(self.channels)
        self.sum_a = z.copy() if self.sum_a is None else self.sum_a
        self.sum_a2 = z.copy() if self.sum_a2 is None else self.sum_a2
        self.positive = np.zeros(self.channels, dtype=np.int64) if self.positive is None else self.positive
        self.taylor_sum = z.copy() if self.taylor_sum is None else self.taylor_sum


class StatsAccumulator:
    """Running per-channel sums over the minibatches of one pruning iteration.

    Holds sum(a), sum(a^2), positive and element counts of post-ReLU
    activations, the running sum of per-example Taylor values, and per-example
    spatial means with labels for the information-gain criterion.
    """

    def __init__(self, net, track_examples: bool = True):
        self.channel_ids = _ids(net)
        self.track_examples = track_examples
        self._shapes = {l: (net.specs[l].c_out, int(np.prod(net.shapes[l][1:]))) for l in net.conv_layers}
        self.reset()

    def reset(self):
        self.layers = {l: _LayerStats(c, m) for l, (c, m) in self._shapes.items()}
        self.labels = []
        self.examples = 0

    def update(self, fwd, back=None):
        """Fold one minibatch in. ``back`` (gate gradients) enables the Taylor sums."""
        n = fwd.logits.shape[0]
        for l, st in self.layers.items():
            a = fwd.activations[l]
            if a.shape[1] != st.channels:
                raise ShapeError(f"layer {l}: accumulator expects {st.channels} channels, got {a.shape[1]}")
            st.sum_a += a.sum(axis=(0, 2, 3))
            st.sum_a2 += np.square(a).sum(axis=(0, 2, 3))
            st.positive += np.count_nonzero(a > 0.0, axis=(0, 2, 3))
            st.elements += n * st.map_size
            if self.track_examples:
                st.example_means.append(a.mean(axis=(2, 3)))
            if back is not None:
                st.taylor_sum += taylor_per_example(back.gate_grads[l], st.map_size).sum(axis=0)
                st.taylor_examples += n
        if self.track_examples and fwd.labels is not None:
            self.labels.append(np.asarray(fwd.labels))
        self.examples += n

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        """Add another shard's sums into this one (call in ascending shard order)."""
        for l, st in self.layers.items():
            o = other.layers[l]
            st.sum_a += o.sum_a
            st.sum_a2 += o.sum_a2
            st.positive += o.positive
            st.elements += o.elements
            st.taylor_sum += o.taylor_sum
            st.taylor_examples += o.taylor_examples
            st.example_means += o.example_means
        self.labels += other.labels
        self.examples += other.examples
        return self


def taylor_per_example(gate_grads, map_size) -> np.ndarray:
    """``|(1/M) sum_m dC/dz_m * z_m|`` per example, from gate gradients ``(N, C)``.

    The gate gradient of a channel already equals ``sum_m dC/dz_m * z_m``.
    """
    return np.abs(np.asarray(gate_grads)) / map_size


# ---------------------------------------------------------------------------
# criteria


def weight_criterion(net) -> SaliencyTable:
    """Mean squared kernel weight of each output channel (bias excluded)."""
    raw = {}
    for l in net.conv_layers:
        w = net.params[l][0].value
        raw[l] = np.square(w).reshape(w.shape[0], -1).mean(axis=1)
    return SaliencyTable("weight", raw, _ids(net))


def activation_criteria(acc: StatsAccumulator):
    """Mean, standard deviation and fraction of strictly positive activations."""
    if acc.examples == 0:
        raise UsageError("activation criteria need at least one accumulated batch")
    mean, std, apoz = {}, {}, {}
    for l, st in acc.layers.items():
        mu = st.sum_a / st.elements
        mean[l] = mu
        std[l] = np.sqrt(np.maximum(0.0, st.sum_a2 / st.elements - mu * mu))
        apoz[l] = st.positive / st.elements
    ids = acc.channel_ids
    return (SaliencyTable("activation_mean", mean, ids), SaliencyTable("activation_std", std, ids),
            SaliencyTable("apoz", apoz, ids))


def taylor_criterion(acc: StatsAccumulator) -> SaliencyTable:
    """Per-example ``|mean_m grad*act|`` averaged over all accumulated examples."""
    raw = {}
    for l, st in acc.layers.items():
        if st.taylor_examples == 0:
            raise UsageError("Taylor criterion needs batches accumulated with their backward pass")
        raw[l] = st.taylor_sum / st.taylor_examples
    return SaliencyTable("taylor", raw, acc.channel_ids)


def entropy(counts) -> float:
    """Shannon entropy in nats; cells are summed in sorted order so the result
    does not depend on how the table is laid out."""
    counts = np.sort(np.asarray(counts, dtype=np.float64).ravel())
    total = counts.sum()
    p = counts[counts > 0] / total
    return float(-np.sum(p * np.log(p)))


def information_gain(joint) -> float:
    """``H(x) + H(y) - H(x, y)`` in nats from a joint count table (x rows, y columns)."""
    joint = np.asarray(joint, dtype=np.float64)
    return entropy(joint.sum(axis=1)) + entropy(joint.sum(axis=0)) - entropy(joint)


def quantize(values, bins: int) -> np.ndarray:
    """Equal-width bin index over the observed [min, max] of ``values``."""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        return np.zeros(len(values), dtype=np.int64)
    idx = np.floor((np.asarray(values) - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def mutual_info_criterion(acc: StatsAccumulator, bins: int = 10, class_count: int | None = None) -> SaliencyTable:
    """Information gain between each channel's per-example spatial mean and the label."""
    if not acc.track_examples or acc.examples < 2:
        raise UsageError("information gain needs at least 2 accumulated examples")
    labels = np.concatenate(acc.labels)
    classes = class_count or int(labels.max()) + 1
    raw = {}
    for l, st in acc.layers.items():
        means = np.concatenate(st.example_means, axis=0)
        scores = np.empty(st.channels)
        for k in range(st.channels):
            joint = np.zeros((bins, classes))
            np.add.at(joint, (quantize(means[:, k], bins), labels), 1.0)
            scores[k] = information_gain(joint)
        raw[l] = scores
    return SaliencyTable("mutual_info", raw, acc.channel_ids)


def random_criterion(net, seed: int, draw: int = 0) -> SaliencyTable:
    """I.i.d. uniform scores; ``draw`` selects an independent sub-stream of ``seed``."""
    rng = stream(seed, "random_criterion", draw)
    raw = {l: rng.uniform(0.0, 1.0, size=net.specs[l].c_out) for l in net.conv_layers}
    return SaliencyTable("random", raw, _ids(net))


# ---------------------------------------------------------------------------
# normalisation / regularisation / combination


def normalize(table: SaliencyTable, kind: str = "l2") -> SaliencyTable:
    """Layer-wise rescaling of the raw scores; degenerate layers pass through."""
    if kind not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {kind!r}")
    out = {}
    for l in table.layers:
        v = table.raw[l]
        if kind == "l2":
            m = np.max(np.abs(v)) if v.size else 0.0
            if m > 0:
                w = v / m  # rescale first so tiny scores do not underflow when squared
                out[l] = w / np.sqrt(np.sum(w * w))
            else:
                out[l] = v.copy()
        elif kind == "l1":
            d = np.sum(np.abs(v))
            out[l] = v / d if d > 0 else v.copy()
        elif kind == "minmax":
            lo, hi = v.min(), v.max()
            out[l] = (v - lo) / (hi - lo) if hi > lo else v.copy()
        else:
            out[l] = v.copy()
    return table.replace(out, normalization=kind, flops_lambda=0.0)


def flops_regularize(table: SaliencyTable, flops_table, lam: float = 1e-3, unit: float = 1e6) -> SaliencyTable:
    """Subtract ``lam * per_neuron_flops / unit`` from every channel of each layer."""
    out = {l: table.scores[l] - lam * flops_table.per_neuron[l] / unit for l in table.layers}
    return table.replace(out, flops_lambda=lam)


def combine(taylor: SaliencyTable, activation: SaliencyTable, lam: float) -> SaliencyTable:
    """``(1 - lam) * taylor + lam * activation`` on the (normalised) scores."""
    if taylor.layers != activation.layers or any(
        not np.array_equal(taylor.channel_ids[l], activation.channel_ids[l]) for l in taylor.layers
    ):
        raise ShapeError("combined tables must cover the same channels")
    out = {l: (1.0 - lam) * taylor.scores[l] + lam * activation.scores[l] for l in taylor.layers}
    return SaliencyTable("taylor_activation", out, taylor.channel_ids, scores=out,
                         normalization=taylor.normalization)


# ---------------------------------------------------------------------------
# OBD: diagonal of the gate Hessian from random +-1 probes


def hessian_diagonal_probe(grad_fn, point, rng, probes: int = 1, eps: float = 1e-4) -> np.ndarray:
    """Average of ``v * Hv`` over Rademacher probes ``v``.

    ``Hv`` is the central difference ``(grad(x + eps v) - grad(x - eps v)) / (2 eps)``.
    """
    point = np.asarray(point, dtype=np.float64)
    total = np.zeros_like(point)
    for _ in range(probes):
        v = rng.choice(np.array([-1.0, 1.0]), size=point.shape)
        hv = (grad_fn(point + eps * v) - grad_fn(point - eps * v)) / (2.0 * eps)
        total += v * hv
    return total / probes


class DiagonalEstimate:
    """Running Hessian-diagonal estimate: plain mean for ``warmup`` updates, EMA afterwards."""

    def __init__(self, size: int, ema: float = 0.99, warmup: int = 0):
        self.diag = np.zeros(size)
        self.ema = ema
        self.warmup = warmup
        self.count = 0
        self.skipped = 0

    def update(self, estimate) -> bool:
        estimate = np.asarray(estimate, dtype=np.float64)
        if not np.all(np.isfinite(estimate)):
            self.skipped += 1
            log.warning("non-finite Hessian probe result; batch skipped (%d so far)", self.skipped)
            return False
        if self.count < max(1, self.warmup):
            self.diag += (estimate - self.diag) / (self.count + 1)
        else:
            self.diag = self.ema * self.diag + (1.0 - self.ema) * estimate
        self.count += 1
        return True

    def delete(self, index: int):
        self.diag = np.delete(self.diag, index)


class GateHessianEstimator:
    """OBD saliency for feature maps: half the gate-Hessian diagonal.

    With gates at 1 the OBD term ``w^2 h_kk / 2`` reduces to ``h_kk / 2``.
    """

    def __init__(self, net, ema: float = 0.99, warmup: int = 0, eps: float = 1e-4):
        self.layers = list(net.conv_layers)
        self.channel_ids = _ids(net)
        self.eps = eps
        self.estimate = DiagonalEstimate(net.total_maps(), ema, warmup)

    def _offsets(self):
        sizes = [len(self.channel_ids[l]) for l in self.layers]
        return np.concatenate([[0], np.cumsum(sizes)])

    def gate_gradient(self, net, images, labels, flat_gates):
        off = self._offsets()
        gates = {l: flat_gates[off[i]:off[i + 1]] for i, l in enumerate(self.layers)}
        back = net.backward(net.forward(images, labels, gates=gates), param_grads=False)
        return np.concatenate([back.total_gate_grad(l) for l in self.layers])

    def update(self, net, images, labels, rng, probes: int = 1) -> bool:
        point = np.concatenate([np.asarray(net.gates[l], dtype=np.float64) for l in self.layers])
        with np.errstate(all="ignore"):
            est = hessian_diagonal_probe(
                lambda g: self.gate_gradient(net, images, labels, g), point, rng, probes, self.eps
            )
        return self.estimate.update(est)

    def remove_channel(self, layer, position):
        off = self._offsets()
        self.estimate.delete(off[self.layers.index(layer)] + position)
        self.channel_ids[layer] = np.delete(self.channel_ids[layer], position)

    def diagonal(self) -> dict:
        off = self._offsets()
        return {l: self.estimate.diag[off[i]:off[i + 1]].copy() for i, l in enumerate(self.layers)}

    def table(self) -> SaliencyTable:
        if self.estimate.count == 0:
            raise UsageError("OBD criterion needs at least one probed batch")
        raw = {l: 0.5 * np.abs(d) for l, d in self.diagonal().items()}
        return SaliencyTable("obd", raw, {l: c.copy() for l, c in self.channel_ids.items()})


def obd_criterion(net, data_stream, probes_per_batch: int = 1, ema: float = 0.99, rng=None,
                  warmup: int = 0, estimator: GateHessianEstimator | None = None) -> SaliencyTable:
    """Estimate OBD saliencies over ``data_stream`` (iterable of ``(images, labels)``)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    est = estimator or GateHessianEstimator(net, ema=ema, warmup=warmup)
    for images, labels in data_stream:
        est.update(net, images, labels, rng, probes_per_batch)
    return est.table()
