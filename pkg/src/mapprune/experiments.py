"""Experiment drivers shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging

import numpy as np

from . import criteria as C
from .config import ExperimentConfig, PruneConfig
from .data import Dataset, load_idx, synth_dataset
from .errors import ConfigError, DataError
from .network import build_testbed, evaluate, load
from .oracle import (compute_oracle, layer_rank_stats, oracle_scores, per_layer_spearman, rank_from_scores,
                     spearman_scores)
from .pruner import MinibatchStream, finetune, kernel_norms, regularization_baseline, run
from .rng import stream

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data and model


def load_data(cfg: ExperimentConfig):
    """``(train, test)``; ``test`` is None for IDX input without test files."""
    d = cfg.data
    if d.source == "synthetic":
        return (synth_dataset(d.classes, d.per_class, d.hw, cfg.seed, "train", d.noise),
                synth_dataset(d.classes, d.test_per_class, d.hw, cfg.seed, "test", d.noise))
    try:
        train = load_idx(d.train_images, d.train_labels, "train", d.classes)
        test = None
        if d.test_images and d.test_labels:
            test = load_idx(d.test_images, d.test_labels, "test", d.classes)
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {exc.filename}") from None
    return train, test


def train_model(cfg: ExperimentConfig, train: Dataset, test: Dataset | None = None):
    """Seeded init plus ``cfg.train.updates`` SGD steps; returns ``(net, history)``."""
    t = cfg.train
    net = build_testbed(train.input_shape, train.class_count, tuple(cfg.model.channels),
                        stream(cfg.seed, "init"), k=cfg.model.kernel)
    losses = []
    history = []

    def after(n):
        step = len(losses)
        if step % t.log_every == 0 or step == t.updates:
            window = losses[-t.log_every:]
            history.append({"update": step, "minibatch_loss": float(np.mean(window))})

    batches = MinibatchStream(len(train), t.batch_size, stream(cfg.seed, "shuffle"))
    finetune(net, train, t.updates, t.lr, t.momentum, t.weight_decay, batches=batches,
             on_batch=lambda fwd, back, x, y: losses.append(fwd.loss), after_step=after)
    return net, history


def model_for(cfg: ExperimentConfig, train, test=None):
    """The configured model file if any, else a freshly trained network."""
    if cfg.model_path:
        try:
            return load(cfg.model_path)
        except FileNotFoundError:
            raise DataError(f"model file not found: {cfg.model_path}") from None
    return train_model(cfg, train, test)[0]


def metrics(net, train, test=None) -> dict:
    loss, acc = evaluate(net, train.images, train.labels)
    out = {"final_train_loss": loss, "final_train_accuracy": acc,
           "final_test_loss": None, "final_test_accuracy": None}
    if test is not None:
        out["final_test_loss"], out["final_test_accuracy"] = evaluate(net, test.images, test.labels)
    return out


# ---------------------------------------------------------------------------
# oracle


def oracle_report(net, data: Dataset):
    records = compute_oracle(net, data.images, data.labels)
    stats = {}
    for mode in ("loss", "abs"):
        stats[f"oracle_{mode}"] = {str(l): v for l, v in
                                   layer_rank_stats(rank_from_scores(oracle_scores(records, mode)), net).items()}
    stats["channels"] = len(records)
    return records, stats


# ---------------------------------------------------------------------------
# criterion-vs-oracle correlation


def criterion_tables(net, train: Dataset, cfg: ExperimentConfig, names=None) -> dict:
    """Score every requested criterion on the training set without updating the network.

    Statistics-based criteria see one ordered pass over the training set;
    OBD sees ``obd_batches`` shuffled minibatches. ``random`` maps to a list
    of ``random_draws`` tables.
    """
    cc = cfg.correlate
    names = list(cc.criteria if names is None else names)
    if cc.combination_grid and "taylor_activation" not in names:
        names.append("taylor_activation")
    tables = {}
    acc = None
    if set(names) - {"weight", "random", "obd"}:
        acc = C.StatsAccumulator(net, track_examples="mutual_info" in names)
        for lo in range(0, len(train), cc.batch_size):
            x, y = train.images[lo:lo + cc.batch_size], train.labels[lo:lo + cc.batch_size]
            fwd = net.forward(x, y)
            acc.update(fwd, net.backward(fwd, param_grads=False))
        net.zero_grad()
    for name in names:
        if name == "weight":
            tables[name] = C.weight_criterion(net)
        elif name == "random":
            tables[name] = [C.random_criterion(net, cfg.seed, d) for d in range(cc.random_draws)]
        elif name == "taylor":
            tables[name] = C.taylor_criterion(acc)
        elif name in ("activation_mean", "activation_std", "apoz"):
            mean, std, apoz = C.activation_criteria(acc)
            tables[name] = {"activation_mean": mean, "activation_std": std, "apoz": apoz}[name]
        elif name == "mutual_info":
            tables[name] = C.mutual_info_criterion(acc, cc.mi_bins, train.class_count)
        elif name == "obd":
            batches = MinibatchStream(len(train), cc.batch_size, stream(cfg.seed, "shuffle"))
            data = ((train.images[i], train.labels[i]) for i in (batches.next() for _ in range(cc.obd_batches)))
            tables[name] = C.obd_criterion(net, data, cc.obd_probes, cfg.prune.obd_ema,
                                           stream(cfg.seed, "probes"), cfg.prune.obd_warmup_batches)
        elif name == "taylor_activation":
            tables[name] = (C.normalize(C.taylor_criterion(acc), "l2"),
                            C.normalize(C.activation_criteria(acc)[0], "l2"))
        else:
            raise ConfigError(f"correlate.criteria: unknown criterion {name!r}")
    return tables


SCOPES_NORMALIZED = ("l2", "l1", "minmax")


def _scope_rows(table, oracle, normalized=True):
    rows = []
    raw = table.as_dict(raw=True)
    per_layer = per_layer_spearman(raw, oracle)
    for l, s in per_layer.items():
        rows.append((f"layer_{l}", s))
    rows.append(("per_layer_mean", float(np.mean(list(per_layer.values())))))
    rows.append(("all_layers", spearman_scores(raw, oracle)))
    for kind in SCOPES_NORMALIZED if normalized else ():
        rows.append((f"all_layers_{kind}", spearman_scores(C.normalize(table, kind).as_dict(), oracle)))
    return rows


def correlation_rows(tables: dict, oracle: dict, grid=()):
    """``[(criterion, scope, spearman)]`` against the oracle-abs scores."""
    rows = [("oracle_abs", scope, s) for scope, s in _scope_rows(
        C.SaliencyTable("oracle_abs", _layer_arrays(oracle), _layer_ids(oracle)), oracle, normalized=False)]
    for name, table in tables.items():
        if name == "taylor_activation":
            continue
        if name == "random":
            per_draw = [_scope_rows(t, oracle) for t in table]
            for i, (scope, _) in enumerate(per_draw[0]):
                rows.append((name, scope, float(np.mean([d[i][1] for d in per_draw]))))
        else:
            rows.extend((name, scope, s) for scope, s in _scope_rows(table, oracle))
    if "taylor_activation" in tables:
        tay, act = tables["taylor_activation"]
        for lam in grid:
            joint = C.combine(tay, act, lam)
            rows.append((f"taylor_activation@{lam:g}", "all_layers_l2", spearman_scores(joint.as_dict(), oracle)))
    return rows


def _layer_ids(scores):
    out = {}
    for l, c in sorted(scores):
        out.setdefault(l, []).append(c)
    return {l: np.asarray(v) for l, v in out.items()}


def _layer_arrays(scores):
    return {l: np.asarray([scores[(l, c)] for c in ids]) for l, ids in _layer_ids(scores).items()}


# ---------------------------------------------------------------------------
# regularisation baseline vs iterative Taylor on one layer


def baseline_sweep(net, train, test, cfg: ExperimentConfig):
    """Rows for the threshold-regularisation sweep and for Taylor pruning of the same layer."""
    b, p = cfg.baseline, cfg.prune
    layer = b.layer if b.layer is not None else max(net.conv_layers)
    if layer not in net.conv_layers:
        raise ConfigError(f"baseline.layer: {layer} is not a conv layer")
    width = net.specs[layer].c_out
    rows = []
    for gamma in b.gammas:
        history = []
        pruned, trace = regularization_baseline(
            net, train, gamma, layer, b.threshold, b.updates, p.lr, p.momentum, p.weight_decay,
            p.batch_size, cfg.seed, test, norm_history=history)
        end = trace.all_records()[-1]
        # mean kernel norm right after the penalised fine-tuning, before removal
        norm = float(history[-1].mean()) if history else float(kernel_norms(net, layer).mean())
        rows.append(_baseline_row("regularization", gamma, pruned.specs[layer].c_out, width, norm, end))
    others = net.total_maps() - width
    tcfg = PruneConfig(**{**p.model_dump(exclude={"target_maps", "target_flops", "max_iterations",
                                                  "accuracy_floor"}),
                          "criterion": "taylor", "prune_layers": [layer], "target_maps": others + 1,
                          "seed": cfg.seed})
    _, trace = run(net, train, tcfg, test)
    for r in trace.all_records():
        rows.append(_baseline_row("taylor", None, r.remaining_maps - others, width, None, r))
    return rows


BASELINE_FIELDS = ("method", "gamma", "layer_maps", "layer_pruned_fraction", "mean_kernel_norm",
                   "train_accuracy", "test_accuracy")


def _baseline_row(method, gamma, maps, width, norm, rec):
    return {"method": method, "gamma": gamma, "layer_maps": maps, "layer_pruned_fraction": 1.0 - maps / width,
            "mean_kernel_norm": norm, "train_accuracy": rec.train_accuracy, "test_accuracy": rec.test_accuracy}
