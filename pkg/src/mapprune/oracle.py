"""Single-map ablation oracle, rankings and Spearman rank correlation."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .network import evaluate, find_channel, flops, prune_channel
from .trace import PruneRecord, PruneTrace


@dataclass(frozen=True)
class OracleRecord:
    layer: int
    channel: int  # original channel id
    delta_loss: float  # C(ablated) - C(base)
    abs_delta_loss: float
    base_loss: float


def compute_oracle(net, images, labels, batch_size: int = 512):
    """Ablate every surviving channel in turn by zeroing its gate.

    The network is never modified: each ablation passes a gate override to
    the forward pass, so the stored gates stay as they were.
    """
    base, _ = evaluate(net, images, labels, batch_size)
    records = []
    for l in net.conv_layers:
        for pos, cid in enumerate(net.channel_ids[l]):
            if net.gates[l][pos] == 0.0:
                continue
            g = np.array(net.gates[l], dtype=np.float64)
            g[pos] = 0.0
            loss, _ = evaluate(net, images, labels, batch_size, gates={l: g})
            d = loss - base
            records.append(OracleRecord(l, int(cid), d, abs(d), base))
    return records


def oracle_scores(records, mode: str = "abs") -> dict:
    """Importance per (layer, channel): signed delta for ``loss``, absolute for ``abs``."""
    if mode not in ("loss", "abs"):
        raise ValueError(f"oracle mode must be 'loss' or 'abs', got {mode!r}")
    key = "delta_loss" if mode == "loss" else "abs_delta_loss"
    return {(r.layer, r.channel): getattr(r, key) for r in records}


@dataclass
class Ranking:
    order: list  # (layer, channel) keys, most important first

    def __post_init__(self):
        self.ranks = {k: i + 1 for i, k in enumerate(self.order)}
        if len(self.ranks) != len(self.order):
            raise ValueError("ranking contains duplicate keys")

    def __len__(self):
        return len(self.order)

    def least_important(self):
        return list(reversed(self.order))


def rank_from_scores(scores: dict, descending: bool = True) -> Ranking:
    """Rank keys so that rank 1 is the most important.

    ``descending=True`` treats high scores as important. Ties always go to the
    smaller (layer, channel) key.
    """
    sign = -1.0 if descending else 1.0
    order = sorted(scores, key=lambda k: (sign * scores[k], k))
    return Ranking(order)


def spearman(rank_a: Ranking, rank_b: Ranking) -> float:
    """``1 - 6 * sum(d^2) / (N (N^2 - 1))`` over the shared keys."""
    if set(rank_a.ranks) != set(rank_b.ranks):
        raise ShapeError("rankings cover different channel sets")
    n = len(rank_a)
    if n < 2:
        raise ShapeError("Spearman correlation needs at least 2 ranked items")
    d2 = sum((rank_a.ranks[k] - rank_b.ranks[k]) ** 2 for k in rank_a.ranks)
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0))


def spearman_scores(a: dict, b: dict) -> float:
    return spearman(rank_from_scores(a), rank_from_scores(b))


def per_layer_spearman(a: dict, b: dict) -> dict:
    """Spearman within each layer (layers with fewer than 2 channels are skipped)."""
    out = {}
    for layer in sorted({k[0] for k in a}):
        sa = {k: v for k, v in a.items() if k[0] == layer}
        sb = {k: v for k, v in b.items() if k[0] == layer}
        if len(sa) >= 2:
            out[layer] = spearman_scores(sa, sb)
    return out


def layer_rank_stats(ranking: Ranking, net=None) -> dict:
    """Min, max and median of the global ranks held by each layer's channels."""
    by_layer = {}
    for key, r in ranking.ranks.items():
        by_layer.setdefault(key[0], []).append(r)
    if net is not None:
        missing = set(net.conv_layers) - set(by_layer)
        if missing:
            raise ShapeError(f"ranking has no channels for layers {sorted(missing)}")
    return {
        l: {"min": int(min(r)), "max": int(max(r)), "median": float(np.median(r)), "count": len(r)}
        for l, r in sorted(by_layer.items())
    }


def oracle_trajectory(net, ranking: Ranking, images, labels, removals: int, mode: str = "abs",
                      test_images=None, test_labels=None) -> PruneTrace:
    """Prune by a fixed precomputed ranking, least important first, without any updates.

    Channels whose removal would empty a layer are skipped. Accuracy is
    measured on ``(images, labels)`` after each removal.
    """
    total = net.total_maps()

    def record(n, it, layer, channel, score):
        loss, acc = evaluate(n, images, labels)
        test_acc = evaluate(n, test_images, test_labels)[1] if test_images is not None else None
        return PruneRecord(it, layer, channel, score, n.total_maps(), 1.0 - n.total_maps() / total,
                           flops(n).network_total, n.param_count(), loss, acc, test_acc)

    trace = PruneTrace(record(net, 0, None, None, None), config={"mode": mode, "removals": removals})
    queue = ranking.least_important()
    it = 0
    for layer, cid in queue:
        if it >= removals:
            break
        if net.specs[layer].c_out < 2:
            continue
        net = prune_channel(net, layer, find_channel(net, layer, cid))
        it += 1
        trace.append(record(net, it, layer, cid, float(ranking.ranks[(layer, cid)])))
    trace.stop_reason = "removals" if it == removals else "exhausted"
    return trace


def write_oracle_csv(path, records):
    rl = rank_from_scores(oracle_scores(records, "loss"))
    ra = rank_from_scores(oracle_scores(records, "abs"))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "channel", "delta_loss", "abs_delta_loss", "global_rank_loss", "global_rank_abs"])
        for r in records:
            k = (r.layer, r.channel)
            w.writerow([r.layer, r.channel, repr(r.delta_loss), repr(r.abs_delta_loss), rl.ranks[k], ra.ranks[k]])
