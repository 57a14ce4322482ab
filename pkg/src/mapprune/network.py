"""Sequential conv nets with per-channel pruning gates.

Every ``conv2d`` layer owns a gate vector. The gate multiplies the layer's
output channel after bias-add, before the following ReLU; with gate values in
``{0, 1}`` this is identical to gating the rectified output. The derivative of
the loss with respect to a gate is therefore ``sum_m dC/dz_m * z_m`` over the
channel's positions, which is the numerator of the Taylor saliency.

Structural pruning (:func:`prune_channel`) physically deletes a channel. When
a conv layer feeds a ``flatten -> dense`` pair, channel ``c`` of the
``(C, H, W)`` map owns the contiguous dense input columns
``[c*H*W, (c+1)*H*W)`` (row-major flatten).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ShapeError, UsageError
from .tensor import (
    DTYPE,
    Parameter,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    per_example_cross_entropy,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)

LAYER_KINDS = ("conv2d", "relu", "maxpool2x2", "flatten", "dense")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int | None = None
    c_out: int | None = None
    k: int | None = None
    padding: int | None = None
    in_features: int | None = None
    out_features: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")

    @classmethod
    def conv(cls, c_in, c_out, k=3, padding=None):
        return cls("conv2d", c_in=c_in, c_out=c_out, k=k, padding=(k - 1) // 2 if padding is None else padding)

    @classmethod
    def dense(cls, in_features, out_features):
        return cls("dense", in_features=in_features, out_features=out_features)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


RELU = LayerSpec("relu")
POOL = LayerSpec("maxpool2x2")
FLATTEN = LayerSpec("flatten")


def infer_shapes(input_shape, specs):
    """Per-example output shape of every layer; raises ShapeError on mismatch."""
    shape = tuple(input_shape)
    out = []
    for i, s in enumerate(specs):
        if s.kind == "conv2d":
            if len(shape) != 3 or shape[0] != s.c_in:
                raise ShapeError(f"layer {i}: conv expects {s.c_in} input channels, got shape {shape}")
            if s.k % 2 == 0 or s.padding not in (0, (s.k - 1) // 2):
                raise ShapeError(f"layer {i}: kernel must be odd with padding 0 or (k-1)/2")
            h = shape[1] + 2 * s.padding - s.k + 1
            w = shape[2] + 2 * s.padding - s.k + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i}: kernel larger than input {shape}")
            shape = (s.c_out, h, w)
        elif s.kind == "maxpool2x2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ShapeError(f"layer {i}: maxpool2x2 needs even spatial dims, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif s.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif s.kind == "dense":
            if len(shape) != 1 or shape[0] != s.in_features:
                raise ShapeError(f"layer {i}: dense expects {s.in_features} inputs, got shape {shape}")
            shape = (s.out_features,)
        out.append(shape)
    return out


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopsTable:
    per_layer_total: dict
    per_neuron: dict
    network_total: float


def flops_for_specs(input_shape, specs, active_channels=None) -> FlopsTable:
    """Sliding-window FLOPs: conv ``2*H*W*(C_in*K^2+1)*C_out``, dense ``(2I-1)*O``.

    ``H, W`` are the conv's output dims (equal to the input dims for same
    padding). ``active_channels`` maps conv layer index to its number of
    unpruned channels; downstream fan-in shrinks accordingly. ReLU, pooling and
    flatten are free.
    """
    active_channels = active_channels or {}
    shapes = infer_shapes(input_shape, specs)
    per_layer, per_neuron = {}, {}
    c_eff = input_shape[0]
    spatial = tuple(input_shape[1:])
    flat_eff = None
    for i, (s, shp) in enumerate(zip(specs, shapes)):
        if s.kind == "conv2d":
            neuron = 2.0 * shp[1] * shp[2] * (c_eff * s.k * s.k + 1)
            c_out = active_channels.get(i, s.c_out)
            per_neuron[i] = neuron
            per_layer[i] = neuron * c_out
            c_eff, spatial = c_out, shp[1:]
        elif s.kind == "dense":
            n_in = flat_eff if flat_eff is not None else s.in_features
            per_layer[i] = float((2 * n_in - 1) * s.out_features)
            flat_eff = s.out_features
        else:
            per_layer[i] = 0.0
            if s.kind == "maxpool2x2":
                spatial = shp[1:]
            elif s.kind == "flatten":
                flat_eff = c_eff * int(np.prod(spatial))
    return FlopsTable(per_layer, per_neuron, float(sum(per_layer.values())))


def vgg16_specs(classes: int = 1000):
    """Layer specs of VGG-16 for 3x224x224 inputs (shape-only use)."""
    plan = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    specs, c = [], 3
    for item in plan:
        if item == "M":
            specs.append(POOL)
        else:
            specs += [LayerSpec.conv(c, item, 3), RELU]
            c = item
    specs += [
        FLATTEN,
        LayerSpec.dense(512 * 7 * 7, 4096), RELU,
        LayerSpec.dense(4096, 4096), RELU,
        LayerSpec.dense(4096, classes),
    ]
    return specs


# ---------------------------------------------------------------------------
# network


@dataclass
class ForwardResult:
    loss: float
    accuracy: float
    logits: np.ndarray
    per_example_loss: np.ndarray
    activations: dict  # conv layer -> post-ReLU gated output (N, C, H, W)
    cache: list = field(repr=False, default=None)
    gates: dict = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)
    version: int = -1


@dataclass
class BackwardResult:
    gate_grads: dict  # conv layer -> (N, C) per-example d(loss_n)/d(g_k)
    param_grads: list | None = None

    def total_gate_grad(self, layer):
        """Derivative of the batch-mean loss w.r.t. each gate of ``layer``."""
        return self.gate_grads[layer].mean(axis=0)


class Network:
    """A sequence of layers with one gate vector per conv layer."""

    def __init__(self, input_shape, specs, params=None, gates=None, channel_ids=None):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.specs = list(specs)
        self.shapes = infer_shapes(self.input_shape, self.specs)
        self.params = params if params is not None else {}
        for i, s in enumerate(self.specs):
            if s.kind in ("conv2d", "dense"):
                if i not in self.params:
                    raise ShapeError(f"layer {i} ({s.kind}) has no parameters")
                w, b = self.params[i]
                if w.shape != self.weight_shape(i) or b.shape != (self.weight_shape(i)[0],):
                    raise ShapeError(f"layer {i}: parameter shapes {w.shape}, {b.shape} do not match spec")
        self.conv_layers = [i for i, s in enumerate(self.specs) if s.kind == "conv2d"]
        self.gates = gates if gates is not None else {i: np.ones(self.specs[i].c_out) for i in self.conv_layers}
        self.channel_ids = (
            channel_ids if channel_ids is not None
            else {i: np.arange(self.specs[i].c_out) for i in self.conv_layers}
        )
        for i in self.conv_layers:
            if len(self.gates[i]) != self.specs[i].c_out or len(self.channel_ids[i]) != self.specs[i].c_out:
                raise ShapeError(f"layer {i}: gate/channel-id length differs from {self.specs[i].c_out}")
        self.version = 0

    # -- construction ------------------------------------------------------

    @classmethod
    def initialize(cls, input_shape, specs, rng):
        """Zero-mean Gaussian weights with std ``sqrt(2 / fan_in)``, zero biases."""
        infer_shapes(input_shape, specs)
        params = {}
        for i, s in enumerate(specs):
            if s.kind == "conv2d":
                shape = (s.c_out, s.c_in, s.k, s.k)
            elif s.kind == "dense":
                shape = (s.out_features, s.in_features)
            else:
                continue
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            params[i] = (Parameter(w), Parameter(np.zeros(shape[0])))
        return cls(input_shape, specs, params)

    def weight_shape(self, i):
        s = self.specs[i]
        if s.kind == "conv2d":
            return (s.c_out, s.c_in, s.k, s.k)
        return (s.out_features, s.in_features)

    def parameters(self):
        """All parameters in layer order, weight before bias."""
        return [p for i in sorted(self.params) for p in self.params[i]]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def channel_counts(self):
        return {i: self.specs[i].c_out for i in self.conv_layers}

    def total_maps(self) -> int:
        return sum(self.channel_counts().values())

    def copy(self) -> "Network":
        return Network(
            self.input_shape,
            self.specs,
            {i: (w.copy(), b.copy()) for i, (w, b) in self.params.items()},
            {i: g.copy() for i, g in self.gates.items()},
            {i: c.copy() for i, c in self.channel_ids.items()},
        )

    def touch(self):
        """Invalidate outstanding forward caches (call after any parameter change)."""
        self.version += 1

    # -- evaluation --------------------------------------------------------

    def forward(self, x, labels=None, gates=None, keep_cache=True) -> ForwardResult:
        """Run the batch through the network.

        ``gates`` optionally overrides the stored gate vectors (mapping conv
        layer -> vector); entries not given fall back to ``self.gates``.
        """
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match input shape {self.input_shape}")
        g_all = dict(self.gates)
        if gates:
            g_all.update(gates)
        cache = []
        activations = {}
        h = x
        last_conv = None
        for i, s in enumerate(self.specs):
            if s.kind == "conv2d":
                w, b = self.params[i]
                pre = conv2d_forward(h, w.value, b.value, s.padding)
                cache.append((h, pre))
                h = pre * np.asarray(g_all[i], dtype=DTYPE)[None, :, None, None]
                last_conv = i
                activations[i] = h
            elif s.kind == "relu":
                cache.append(h)
                h = relu_forward(h)
                if last_conv is not None:
                    activations[last_conv] = h
                    last_conv = None
            elif s.kind == "maxpool2x2":
                h, idx = maxpool2x2_forward(h)
                cache.append(idx)
                last_conv = None
            elif s.kind == "flatten":
                cache.append(h.shape)
                h = h.reshape(h.shape[0], -1)
                last_conv = None
            else:
                w, b = self.params[i]
                cache.append(h)
                h = dense_forward(h, w.value, b.value)
                last_conv = None
        logits = h
        loss = accuracy = float("nan")
        per_example = None
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            per_example = per_example_cross_entropy(logits, labels)
            loss = float(per_example.mean())
            accuracy = float(np.mean(np.argmax(logits, axis=1) == labels)) if len(labels) else float("nan")
        return ForwardResult(
            loss=loss,
            accuracy=accuracy,
            logits=logits,
            per_example_loss=per_example,
            activations=activations,
            cache=cache if keep_cache else None,
            gates=g_all,
            labels=labels,
            version=self.version,
        )

    def backward(self, result: ForwardResult, param_grads: bool = True) -> BackwardResult:
        """Back-propagate the batch-mean cross-entropy of ``result``.

        Parameter gradients are added into each ``Parameter.gradient`` when
        ``param_grads`` is true. Gate gradients are returned per example,
        as derivatives of that example's own loss (so the batch-loss
        derivative is their mean over the batch).
        """
        if result.cache is None or result.labels is None:
            raise UsageError("backward needs a forward result with cache and labels")
        if result.version != self.version:
            raise UsageError("stale forward cache: the network changed since forward()")
        n = result.logits.shape[0]
        _, grad = softmax_cross_entropy(result.logits, result.labels)
        gate_grads = {}
        grads_out = [] if param_grads else None
        for i in range(len(self.specs) - 1, -1, -1):
            s = self.specs[i]
            c = result.cache[i]
            if s.kind == "dense":
                w, b = self.params[i]
                gx, gw, gb = dense_backward(grad, c, w.value)
                if param_grads:
                    w.gradient += gw
                    b.gradient += gb
                    grads_out += [gb, gw]
                grad = gx
            elif s.kind == "flatten":
                grad = grad.reshape(c)
            elif s.kind == "maxpool2x2":
                grad = maxpool2x2_backward(grad, c)
            elif s.kind == "relu":
                grad = relu_backward(grad, c)
            else:
                inp, pre = c
                gate_grads[i] = n * np.einsum("nkyx,nkyx->nk", grad, pre)
                grad = grad * np.asarray(result.gates[i], dtype=DTYPE)[None, :, None, None]
                w, b = self.params[i]
                if i == 0 and not param_grads:
                    break
                gx, gw, gb = conv2d_backward(grad, inp, w.value, s.padding, input_grad=i > 0)
                if param_grads:
                    w.gradient += gw
                    b.gradient += gb
                    grads_out += [gb, gw]
                grad = gx
        if param_grads:
            grads_out.reverse()
        return BackwardResult(gate_grads=gate_grads, param_grads=grads_out)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def evaluate(net: Network, images, labels, batch_size: int = 512, gates=None):
    """Mean loss and top-1 accuracy over a dataset, chunked for memory."""
    n = len(labels)
    if n == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        r = net.forward(images[start:start + batch_size], labels[start:start + batch_size],
                        gates=gates, keep_cache=False)
        loss_sum += float(r.per_example_loss.sum())
        correct += int(np.sum(np.argmax(r.logits, axis=1) == r.labels))
    return loss_sum / n, correct / n


def forward(net: Network, batch, labels, gates=None) -> ForwardResult:
    return net.forward(batch, labels, gates=gates)


def backward(net: Network, result: ForwardResult) -> BackwardResult:
    return net.backward(result)


def flops(net: Network) -> FlopsTable:
    active = {i: int(np.count_nonzero(net.gates[i])) for i in net.conv_layers}
    return flops_for_specs(net.input_shape, net.specs, active)


def build_testbed(input_shape=(1, 16, 16), classes: int = 4, channels=(8, 16), rng=None, k: int = 3):
    """The desk-scale reference model: (conv-relu-pool) blocks, flatten, dense."""
    rng = rng if rng is not None else np.random.default_rng(0)
    specs, c = [], input_shape[0]
    for ch in channels:
        specs += [LayerSpec.conv(c, ch, k), RELU, POOL]
        c = ch
    h, w = input_shape[1] >> len(channels), input_shape[2] >> len(channels)
    specs += [FLATTEN, LayerSpec.dense(c * h * w, classes)]
    return Network.initialize(input_shape, specs, rng)


# ---------------------------------------------------------------------------
# structural pruning


def _consumer(net: Network, layer: int):
    """Index of the first parametrised layer reading ``layer``'s channels, plus
    the spatial block size that each channel occupies in its input."""
    spatial = 1
    for j in range(layer + 1, len(net.specs)):
        s = net.specs[j]
        if s.kind == "conv2d":
            return j, 1
        if s.kind == "dense":
            return j, spatial
        if s.kind == "flatten":
            shp = net.shapes[j - 1]
            spatial = int(shp[1] * shp[2])
    return None, 0


def prune_channel(net: Network, layer_index: int, channel: int) -> Network:
    """Return a copy of ``net`` with one conv output channel removed.

    Removes the channel's kernel stack, bias, gate and id, and the matching
    input slice of the next conv layer (or the channel's block of dense
    input columns). ``channel`` is the current position within the layer.
    """
    if layer_index not in net.conv_layers:
        raise ShapeError(f"layer {layer_index} is not a conv layer")
    spec = net.specs[layer_index]
    if not 0 <= channel < spec.c_out:
        raise ShapeError(f"channel {channel} out of range for layer {layer_index} ({spec.c_out} channels)")
    if spec.c_out < 2:
        raise ShapeError(f"refusing to prune the last channel of layer {layer_index}")
    consumer, block = _consumer(net, layer_index)
    if consumer is None:
        raise ShapeError(f"layer {layer_index} output is not consumed by a parametrised layer")

    out = net.copy()
    keep = np.delete(np.arange(spec.c_out), channel)
    w, b = out.params[layer_index]
    out.params[layer_index] = (_slice_param(w, keep, 0), _slice_param(b, keep, 0))
    out.specs[layer_index] = LayerSpec.conv(spec.c_in, spec.c_out - 1, spec.k, spec.padding)
    out.gates[layer_index] = out.gates[layer_index][keep]
    out.channel_ids[layer_index] = out.channel_ids[layer_index][keep]

    cs = net.specs[consumer]
    cw, cb = out.params[consumer]
    if cs.kind == "conv2d":
        out.params[consumer] = (_slice_param(cw, keep, 1), cb)
        out.specs[consumer] = LayerSpec.conv(cs.c_in - 1, cs.c_out, cs.k, cs.padding)
    else:
        cols = (keep[:, None] * block + np.arange(block)[None, :]).ravel()
        out.params[consumer] = (_slice_param(cw, cols, 1), cb)
        out.specs[consumer] = LayerSpec.dense(cs.in_features - block, cs.out_features)
    out.shapes = infer_shapes(out.input_shape, out.specs)
    out.version = net.version + 1
    return out


def _slice_param(p: Parameter, idx, axis) -> Parameter:
    return Parameter(
        np.ascontiguousarray(np.take(p.value, idx, axis=axis)),
        np.ascontiguousarray(np.take(p.gradient, idx, axis=axis)),
        np.ascontiguousarray(np.take(p.momentum_buffer, idx, axis=axis)),
    )


def find_channel(net: Network, layer: int, channel_id: int) -> int:
    """Current position of the channel whose original id is ``channel_id``."""
    hits = np.flatnonzero(net.channel_ids[layer] == channel_id)
    if hits.size != 1:
        raise KeyError(f"channel id {channel_id} not present in layer {layer}")
    return int(hits[0])


# ---------------------------------------------------------------------------
# serialization
#
# layout: b"PRNB" | u32 version | u32 manifest length | manifest (UTF-8 JSON)
#         | payload: little-endian f64, per parameter value (then momentum
#           buffers when "has_momentum") | per conv layer: packed gate bits

MAGIC = b"PRNB"
FORMAT_VERSION = 1


def save(net: Network, path, include_momentum: bool = True):
    for i in net.conv_layers:
        if not np.all((net.gates[i] == 0) | (net.gates[i] == 1)):
            raise ValueError(f"layer {i}: only binary gates can be saved")
    params = net.parameters()
    manifest = {
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.specs],
        "params": [list(p.shape) for p in params],
        "payload_values": int(sum(p.size for p in params)) * (2 if include_momentum else 1),
        "has_momentum": include_momentum,
        "channel_ids": {str(i): net.channel_ids[i].tolist() for i in net.conv_layers},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    for p in params:
        chunks.append(p.value.astype("<f8").tobytes())
    if include_momentum:
        for p in params:
            chunks.append(p.momentum_buffer.astype("<f8").tobytes())
    for i in net.conv_layers:
        chunks.append(np.packbits(net.gates[i].astype(np.uint8), bitorder="little").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> Network:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ModelFormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    if len(data) < 12 + mlen:
        raise ModelFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
        specs = [LayerSpec(**d) for d in manifest["layers"]]
        input_shape = tuple(manifest["input_shape"])
        shapes = [tuple(s) for s in manifest["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: corrupt manifest: {exc}") from exc

    expected = []
    for i, s in enumerate(specs):
        if s.kind == "conv2d":
            expected += [(s.c_out, s.c_in, s.k, s.k), (s.c_out,)]
        elif s.kind == "dense":
            expected += [(s.out_features, s.in_features), (s.out_features,)]
    if shapes != expected:
        raise ModelFormatError(f"{path}: declared parameter shapes do not match the layer manifest")
    n_values = sum(int(np.prod(s)) for s in shapes)
    has_mom = bool(manifest.get("has_momentum", False))
    if manifest.get("payload_values") != n_values * (2 if has_mom else 1):
        raise ModelFormatError(f"{path}: declared payload length does not match parameter shapes")
    conv_idx = [i for i, s in enumerate(specs) if s.kind == "conv2d"]
    gate_bytes = sum((specs[i].c_out + 7) // 8 for i in conv_idx)
    total = 12 + mlen + 8 * manifest["payload_values"] + gate_bytes
    if len(data) < total:
        raise ModelFormatError(f"{path}: truncated payload ({len(data)} of {total} bytes)")
    if len(data) > total:
        raise ModelFormatError(f"{path}: {len(data) - total} unexpected trailing bytes")

    off = 12 + mlen
    values = np.frombuffer(data, dtype="<f8", count=manifest["payload_values"], offset=off).astype(DTYPE)
    off += 8 * manifest["payload_values"]
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(values[pos:pos + n].reshape(s).copy())
        pos += n
    moms = []
    if has_mom:
        for s in shapes:
            n = int(np.prod(s))
            moms.append(values[pos:pos + n].reshape(s).copy())
            pos += n
    params, k = {}, 0
    for i, s in enumerate(specs):
        if s.kind in ("conv2d", "dense"):
            pw = Parameter(arrays[k], momentum_buffer=moms[k] if has_mom else None)
            pb = Parameter(arrays[k + 1], momentum_buffer=moms[k + 1] if has_mom else None)
            params[i] = (pw, pb)
            k += 2
    gates, ids = {}, {}
    for i in conv_idx:
        nb = (specs[i].c_out + 7) // 8
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nb, offset=off), bitorder="little")
        gates[i] = bits[: specs[i].c_out].astype(DTYPE)
        off += nb
        ids[i] = np.asarray(manifest["channel_ids"][str(i)], dtype=np.int64)
    try:
        return Network(input_shape, specs, params, gates, ids)
    except ShapeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc


# re-exported for callers that only need shape bookkeeping
__all__ = [
    "BackwardResult", "FlopsTable", "ForwardResult", "LayerSpec", "Network",
    "backward", "build_testbed", "evaluate", "find_channel", "flops", "flops_for_specs",
    "forward", "infer_shapes", "load", "prune_channel", "save", "vgg16_specs",
]
