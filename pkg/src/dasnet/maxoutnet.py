"""Convolutional maxout classifier with per-map multiplicative gates.

A net is a stack of conv-maxout layers (convolution, cross-channel max,
optional spatial max pool) followed by a maxout classifier and a softmax
output. Every post-maxout map of every conv layer carries one gate; the
gate scales that map's activations on a given forward pass.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import Dataset, FormatError
from .numerics import DimensionError, NumericalError, RngStream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    """Shape of one layer.

    For ``kind == "conv"`` the fields describe a conv-maxout layer with
    ``conv_maps`` convolution outputs reduced by blocks of ``block``. For
    ``kind == "classifier"``, ``in_maps`` is the flattened input length,
    ``conv_maps`` the number of linear units and ``block`` the maxout block.
    ``dropout`` is the drop probability applied to the layer's input.
    """

    kind: str
    in_maps: int
    conv_maps: int
    block: int
    kernel: int = 1
    stride: int = 1
    pool_window: int = 0
    pool_stride: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in ("conv", "classifier"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.block < 1 or self.conv_maps % self.block:
            raise DimensionError(f"block {self.block} does not divide {self.conv_maps} maps")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def out_maps(self) -> int:
        return self.conv_maps // self.block


@dataclass
class MaxoutNet:
    input_shape: tuple[int, int, int]
    conv: list[LayerSpec]
    classifier: LayerSpec
    classes: int
    output_dropout: float = 0.0
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def gate_dimension(self) -> int:
        return sum(layer.out_maps for layer in self.conv)

    @property
    def gate_slices(self) -> list[slice]:
        out, start = [], 0
        for layer in self.conv:
            out.append(slice(start, start + layer.out_maps))
            start += layer.out_maps
        return out

    @property
    def hidden(self) -> int:
        return self.classifier.out_maps

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Output shape (maps, height, width) of every conv layer."""
        c, m, n = self.input_shape
        shapes = []
        for layer in self.conv:
            if layer.in_maps != c:
                raise DimensionError(f"layer expects {layer.in_maps} maps, receives {c}")
            m, n = nx.conv_output_size(m, layer.kernel, layer.stride), nx.conv_output_size(
                n, layer.kernel, layer.stride
            )
            if layer.pool_window:
                m = nx.conv_output_size(m, layer.pool_window, layer.pool_stride)
                n = nx.conv_output_size(n, layer.pool_window, layer.pool_stride)
            if m < 1 or n < 1:
                raise DimensionError("layer stack shrinks maps below 1 pixel")
            c = layer.out_maps
            shapes.append((c, m, n))
        return shapes

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.conv)):
            names += [f"conv{i}.w", f"conv{i}.b"]
        return names + ["cls.w", "cls.b", "out.w", "out.b"]

    def copy(self) -> "MaxoutNet":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def build_net(
    input_shape,
    conv: list[LayerSpec],
    hidden: int,
    hidden_block: int,
    classes: int,
    rng: RngStream,
    classifier_dropout: float = 0.0,
    output_dropout: float = 0.0,
) -> MaxoutNet:
    """Create a net with Glorot-uniform weights and zero biases."""
    net = MaxoutNet(tuple(input_shape), list(conv), None, classes, output_dropout)
    c, m, n = net.layer_shapes()[-1] if conv else input_shape
    net.classifier = LayerSpec("classifier", c * m * n, hidden * hidden_block, hidden_block, dropout=classifier_dropout)

    def glorot(shape, fan_in, fan_out):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, shape)

    for i, layer in enumerate(conv):
        k2 = layer.kernel**2
        net.params[f"conv{i}.w"] = glorot(
            (layer.in_maps, layer.conv_maps, layer.kernel, layer.kernel),
            layer.in_maps * k2,
            layer.conv_maps * k2,
        )
        net.params[f"conv{i}.b"] = np.zeros(layer.conv_maps)
    cl = net.classifier
    net.params["cls.w"] = glorot((cl.conv_maps, cl.in_maps), cl.in_maps, cl.conv_maps)
    net.params["cls.b"] = np.zeros(cl.conv_maps)
    net.params["out.w"] = glorot((classes, hidden), hidden, classes)
    net.params["out.b"] = np.zeros(classes)
    return net


PRESETS = {
    # 2 conv-maxout layers, 24 gated maps each, for 32x32 inputs
    "desk": dict(
        conv=[
            dict(conv_maps=48, block=2, kernel=5, pool_window=2, pool_stride=2, dropout=0.2),
            dict(conv_maps=48, block=2, kernel=5, pool_window=2, pool_stride=2, dropout=0.5),
        ],
        hidden=128,
        hidden_block=4,
        classifier_dropout=0.5,
        output_dropout=0.0,
    ),
    # toy-sized variant for 16x16 inputs
    "toy": dict(
        conv=[
            dict(conv_maps=16, block=2, kernel=5, pool_window=2, pool_stride=2, dropout=0.2),
            dict(conv_maps=16, block=2, kernel=3, pool_window=2, pool_stride=2, dropout=0.5),
        ],
        hidden=32,
        hidden_block=2,
        classifier_dropout=0.5,
        output_dropout=0.0,
    ),
    # three conv-maxout layers plus a maxout hidden layer, valid padding on 32x32
    "full": dict(
        conv=[
            dict(conv_maps=192, block=2, kernel=5, pool_window=3, pool_stride=2, dropout=0.2),
            dict(conv_maps=384, block=2, kernel=5, pool_window=3, pool_stride=2, dropout=0.5),
            dict(conv_maps=384, block=2, kernel=3, pool_window=2, pool_stride=2, dropout=0.5),
        ],
        hidden=500,
        hidden_block=5,
        classifier_dropout=0.5,
        output_dropout=0.0,
    ),
}


def build_preset(name: str, input_shape, classes: int, rng: RngStream, **overrides) -> MaxoutNet:
    """Build one of the named architectures in :data:`PRESETS`."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = {**PRESETS[name], **overrides}
    layers, c = [], input_shape[0]
    for spec in cfg["conv"]:
        layers.append(LayerSpec("conv", c, **spec))
        c = layers[-1].out_maps
    return build_net(
        input_shape, layers, cfg["hidden"], cfg["hidden_block"], classes, rng,
        cfg["classifier_dropout"], cfg["output_dropout"],
    )


# --------------------------------------------------------------------------
# Forward pass


@dataclass
class ForwardTrace:
    """Activations of one (batched) forward pass.

    ``layers[l]`` is the gated output of conv layer ``l`` after maxout and
    spatial pooling, shaped ``(B, c', m', n')``.
    """

    layers: list[np.ndarray]
    flat: np.ndarray  # classifier input, (B, |x|)
    hidden: np.ndarray  # post-maxout classifier units, (B, N)
    probs: np.ndarray  # (B, C)
    gates: np.ndarray | None
    cache: dict = field(default_factory=dict, repr=False)


def _dropout(x, rate, mode, rng, cache, key):
    if mode != "train" or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.uniform(size=x.shape) < keep) / keep
    cache[key] = mask
    return x * mask


def forward(
    net: MaxoutNet,
    images: np.ndarray,
    gates: np.ndarray | None = None,
    mode: str = "eval",
    rng: RngStream | None = None,
    first_layer: np.ndarray | None = None,
    keep_cache: bool = False,
) -> ForwardTrace:
    """Run the net on ``images`` (``(c,m,n)`` or ``(B,c,m,n)``).

    Args:
        gates: ``None`` for the plain net, or a vector of length
            ``gate_dimension`` (shared by the batch) or a ``(B, dim)`` matrix.
        mode: ``"eval"`` (deterministic) or ``"train"`` (inverted dropout,
            requires ``rng``).
        first_layer: cached ungated output of conv layer 0 for these images;
            skips recomputing it.
        keep_cache: retain intermediates needed by :func:`backward`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != tuple(net.input_shape):
        raise DimensionError(f"image shape {x.shape[1:]} does not match net input {net.input_shape}")
    batch = len(x)
    if gates is not None:
        gates = np.asarray(gates, dtype=np.float64)
        if gates.shape[-1] != net.gate_dimension or gates.ndim > 2 or (
            gates.ndim == 2 and gates.shape[0] != batch
        ):
            raise DimensionError(
                f"gate shape {gates.shape} does not fit dimension {net.gate_dimension} "
                f"and batch {batch}"
            )
        if gates.ndim == 1:
            gates = np.broadcast_to(gates, (batch, net.gate_dimension))
    p = net.params
    cache = {}
    outputs = []
    h = x
    for i, (layer, sl) in enumerate(zip(net.conv, net.gate_slices)):
        if i == 0 and first_layer is not None and mode == "eval":
            y = first_layer
        else:
            h = _dropout(h, layer.dropout, mode, rng, cache, f"drop{i}")
            z = nx.conv2d_valid(h, p[f"conv{i}.w"], layer.stride) + p[f"conv{i}.b"][:, None, None]
            y, cidx = nx.channel_max_pool(z, layer.block, return_index=True)
            pidx = None
            pre_pool = y.shape
            if layer.pool_window:
                y, pidx = nx.spatial_max_pool(y, layer.pool_window, layer.pool_stride, return_index=True)
            if keep_cache:
                cache[f"in{i}"] = h
                cache[f"cidx{i}"] = cidx
                cache[f"pidx{i}"] = pidx
                cache[f"pre_pool{i}"] = pre_pool
                cache[f"ungated{i}"] = y
        # Gates are positive, and positive scaling commutes with both max
        # operations, so gating the pooled maps equals gating the conv output.
        if gates is not None:
            y = y * gates[:, sl, None, None]
        outputs.append(y)
        h = y
    flat = h.reshape(batch, -1)
    cl = net.classifier
    if flat.shape[1] != cl.in_maps:
        raise DimensionError(f"classifier expects {cl.in_maps} inputs, receives {flat.shape[1]}")
    fin = _dropout(flat, cl.dropout, mode, rng, cache, "drop_cls")
    zc = fin @ p["cls.w"].T + p["cls.b"]
    grouped = zc.reshape(batch, net.hidden, cl.block)
    hidx = np.argmax(grouped, axis=-1)
    hidden = np.take_along_axis(grouped, hidx[..., None], axis=-1)[..., 0]
    hin = _dropout(hidden, net.output_dropout, mode, rng, cache, "drop_out")
    logits = hin @ p["out.w"].T + p["out.b"]
    probs = nx.softmax(logits)
    if keep_cache:
        cache.update(fin=fin, hidx=hidx, hin=hin, gates=gates)
    if single:
        outputs = [o[0] for o in outputs]
        flat, hidden, probs = flat[0], hidden[0], probs[0]
        gates = None if gates is None else gates[0]
    return ForwardTrace(outputs, flat, hidden, probs, gates, cache)


def predict(net: MaxoutNet, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Class probabilities of the plain (ungated, eval-mode) net."""
    out = [forward(net, images[i : i + batch_size]).probs for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.classes))


def accuracy(net: MaxoutNet, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict(net, data.images), axis=1) == data.labels))


# --------------------------------------------------------------------------
# Backward pass


def loss_and_grads(
    net: MaxoutNet,
    images: np.ndarray,
    labels: np.ndarray,
    mode: str = "train",
    rng: RngStream | None = None,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean cross-entropy over the batch and its gradient for every parameter.

    Returns ``(loss, grads, probs)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    tr = forward(net, images, None, mode, rng, keep_cache=True)
    probs, cache, p = tr.probs, tr.cache, net.params
    batch = len(labels)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(batch), labels], 1e-300))))
    grads = {}

    dlogits = probs.copy()
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch
    grads["out.w"] = dlogits.T @ cache["hin"]
    grads["out.b"] = dlogits.sum(axis=0)
    dhidden = dlogits @ p["out.w"]
    if "drop_out" in cache:
        dhidden = dhidden * cache["drop_out"]
    cl = net.classifier
    dz = np.zeros((batch, net.hidden, cl.block))
    np.put_along_axis(dz, cache["hidx"][..., None], dhidden[..., None], axis=-1)
    dz = dz.reshape(batch, -1)
    grads["cls.w"] = dz.T @ cache["fin"]
    grads["cls.b"] = dz.sum(axis=0)
    dflat = dz @ p["cls.w"]
    if "drop_cls" in cache:
        dflat = dflat * cache["drop_cls"]
    dy = dflat.reshape((batch,) + tr.layers[-1].shape[1:])
    for i in reversed(range(len(net.conv))):
        layer = net.conv[i]
        if layer.pool_window:
            dy = nx.spatial_max_backward(
                dy, cache[f"pidx{i}"], cache[f"pre_pool{i}"], layer.pool_window, layer.pool_stride
            )
        dz = nx.channel_max_backward(dy, cache[f"cidx{i}"], layer.block)
        grads[f"conv{i}.b"] = dz.sum(axis=(0, 2, 3))
        dh, grads[f"conv{i}.w"] = nx.conv2d_backward(cache[f"in{i}"], p[f"conv{i}.w"], dz, layer.stride)
        if i > 0:
            dy = dh
            if f"drop{i}" in cache:
                dy = dy * cache[f"drop{i}"]
    return loss, grads, probs


# --------------------------------------------------------------------------
# Supervised training


@dataclass
class SgdConfig:
    learning_rate: float = 0.05
    lr_decay: float = 0.95  # multiplicative per epoch
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    max_norm: float = 0.0  # 0 disables the per-unit weight norm cap


def _unit_norm_cap(w, limit):
    axes = tuple(i for i in range(w.ndim) if i != (1 if w.ndim == 4 else 0))
    norms = np.sqrt(np.sum(w**2, axis=axes, keepdims=True))
    return w * np.minimum(1.0, limit / np.maximum(norms, 1e-300))


def train_supervised(
    net: MaxoutNet,
    data: Dataset,
    config: SgdConfig,
    rng: RngStream,
    val: Dataset | None = None,
) -> list[dict]:
    """Minibatch SGD with momentum on cross-entropy; updates ``net`` in place.

    Returns one log row per epoch with train/val loss and accuracy. Raises
    :class:`NumericalError` when a batch loss is not finite.
    """
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    history = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay**epoch
        shuffle = rng.spawn(2 * epoch)
        drop = rng.spawn(2 * epoch + 1)
        total, correct, seen = 0.0, 0, 0
        for b, (xb, yb) in enumerate(data.batches(config.batch_size, shuffle)):
            loss, grads, probs = loss_and_grads(net, xb, yb, "train", drop)
            if not np.isfinite(loss):
                wmax = max(float(np.max(np.abs(v))) for v in net.params.values())
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {b}; max |weight| = {wmax:.3g}"
                )
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] - lr * g
                net.params[k] = net.params[k] + velocity[k]
                if config.max_norm and k.endswith(".w"):
                    net.params[k] = _unit_norm_cap(net.params[k], config.max_norm)
            total += loss * len(yb)
            correct += int(np.sum(np.argmax(probs, axis=1) == yb))
            seen += len(yb)
        row = {
            "epoch": epoch,
            "train_loss": total / max(seen, 1),
            "train_acc": correct / max(seen, 1),
            "val_loss": float("nan"),
            "val_acc": float("nan"),
        }
        if val is not None and len(val):
            pv = predict(net, val.images)
            row["val_loss"] = float(-np.mean(np.log(np.maximum(pv[np.arange(len(val)), val.labels], 1e-300))))
            row["val_acc"] = float(np.mean(np.argmax(pv, axis=1) == val.labels))
        log.info("epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        history.append(row)
    return history


# --------------------------------------------------------------------------
# Serialization

_MAGIC = b"DNET"
_VERSION = 1
_LAYER = struct.Struct("<B7Id")  # kind, in, conv, block, kernel, stride, pool_w, pool_s, dropout


def save(net: MaxoutNet, path) -> None:
    """Write ``net`` in the versioned little-endian model format."""
    parts = [_MAGIC, struct.pack("<I", _VERSION)]
    parts.append(struct.pack("<3I", *net.input_shape))
    parts.append(struct.pack("<IId", len(net.conv), net.classes, net.output_dropout))
    for layer in [*net.conv, net.classifier]:
        parts.append(
            _LAYER.pack(
                0 if layer.kind == "conv" else 1, layer.in_maps, layer.conv_maps, layer.block,
                layer.kernel, layer.stride, layer.pool_window, layer.pool_stride, layer.dropout,
            )
        )
    for name in net.param_names():
        parts.append(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _param_shapes(net: MaxoutNet) -> dict[str, tuple]:
    shapes = {}
    for i, layer in enumerate(net.conv):
        shapes[f"conv{i}.w"] = (layer.in_maps, layer.conv_maps, layer.kernel, layer.kernel)
        shapes[f"conv{i}.b"] = (layer.conv_maps,)
    cl = net.classifier
    shapes.update({
        "cls.w": (cl.conv_maps, cl.in_maps), "cls.b": (cl.conv_maps,),
        "out.w": (net.classes, net.hidden), "out.b": (net.classes,),
    })
    return shapes


def load(path) -> MaxoutNet:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, not a model file")
    try:
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported model version {version}")
        input_shape = struct.unpack_from("<3I", blob, 8)
        nconv, classes, out_drop = struct.unpack_from("<IId", blob, 20)
        off = 36
        layers = []
        for _ in range(nconv + 1):
            kind, *ints, drop = _LAYER.unpack_from(blob, off)
            off += _LAYER.size
            layers.append(LayerSpec("conv" if kind == 0 else "classifier", *ints, dropout=drop))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    net = MaxoutNet(tuple(input_shape), layers[:-1], layers[-1], classes, out_drop)
    for name, shape in _param_shapes(net).items():
        size = int(np.prod(shape))
        if off + 8 * size > len(blob):
            raise FormatError(f"{path}: truncated at tensor {name}")
        net.params[name] = np.frombuffer(blob, "<f8", size, off).astype(np.float64).reshape(shape)
        off += 8 * size
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    net.layer_shapes()
    return net
