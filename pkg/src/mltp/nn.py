"""Network specifications, parameter sets and the functional forward pass.

Parameters are never owned by layers. :func:`forward` evaluates a network at
whatever parameter groups it is handed, which may be plain arrays, leaf
nodes, or nodes computed from other parameters (an inner gradient step).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError

LAYER_KINDS = ("conv", "fc", "maxpool", "dropout", "batchnorm", "softmax")
ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")
PARAMETERIZED = ("conv", "fc", "batchnorm", "softmax")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    ``units`` is the filter count (conv), output width (fc) or class count
    (softmax). ``pad=None`` on a conv layer pads to preserve spatial size
    at stride 1. ``stride=None`` means 1 for conv and ``window`` for maxpool.
    """

    kind: str
    units: int = 0
    size: int = 3
    stride: int | None = None
    pad: int | None = None
    window: int = 2
    p: float = 0.0
    activation: str = "relu"
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.kind in ("conv", "fc", "softmax") and self.units < 1:
            raise InvalidInputError(f"{self.kind} layer needs units >= 1")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise InvalidInputError("dropout probability must lie in [0, 1)")

    @property
    def tag(self):
        """Kind tag of the parameter group: conv, fc or other."""
        if self.kind == "conv":
            return "conv"
        if self.kind in ("fc", "softmax"):
            return "fc"
        return "other"

    def conv_stride(self):
        return 1 if self.stride is None else self.stride

    def conv_pad(self):
        return (self.size - 1) // 2 if self.pad is None else self.pad

    def pool_stride(self):
        return self.window if self.stride is None else self.stride


def _conv_out(size, k, stride, pad):
    span = size + 2 * pad - k
    if k > size + 2 * pad or span % stride:
        return None
    return span // stride + 1


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    loss: str = "xent"
    name: str = "net"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.loss not in ("xent", "squared"):
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        if not self.layers:
            raise InvalidInputError("network has no layers")
        if self.loss == "xent":
            kinds = [layer.kind for layer in self.layers]
            if kinds.count("softmax") != 1 or kinds[-1] != "softmax":
                raise InvalidInputError("network must end with exactly one softmax layer")
            if self.layers[-1].units != self.num_classes:
                raise InvalidInputError("softmax width must equal the class count")
        self.infer_shapes()

    def infer_shapes(self):
        """Per-layer output shapes (without the batch axis)."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise InvalidInputError(f"layer {i}: conv needs C×H×W input, got {shape}")
                s, p = layer.conv_stride(), layer.conv_pad()
                h, w = _conv_out(shape[1], layer.size, s, p), _conv_out(shape[2], layer.size, s, p)
                if h is None or w is None:
                    raise InvalidInputError(f"layer {i}: conv output size not integral")
                shape = (layer.units, h, w)
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise InvalidInputError(f"layer {i}: maxpool needs C×H×W input")
                s = layer.pool_stride()
                h, w = _conv_out(shape[1], layer.window, s, 0), _conv_out(shape[2], layer.window, s, 0)
                if h is None or w is None:
                    raise InvalidInputError(f"layer {i}: maxpool output size not integral")
                shape = (shape[0], h, w)
            elif layer.kind in ("fc", "softmax"):
                shape = (layer.units,)
            shapes.append(shape)
        return shapes

    @property
    def param_layers(self):
        """Spec indices of the parameterized layers, in order."""
        return [i for i, layer in enumerate(self.layers) if layer.kind in PARAMETERIZED]

    def group_shapes(self):
        """``(names, shapes)`` of each parameter group."""
        out = []
        shape = self.input_shape
        for layer, next_shape in zip(self.layers, self.infer_shapes()):
            if layer.kind == "conv":
                names = ["W"] + (["b"] if layer.bias else [])
                shapes = [(layer.units, shape[0], layer.size, layer.size)] + (
                    [(layer.units,)] if layer.bias else [])
                out.append((names, shapes))
            elif layer.kind in ("fc", "softmax"):
                fan_in = int(np.prod(shape))
                names = ["W"] + (["b"] if layer.bias else [])
                shapes = [(fan_in, layer.units)] + ([(layer.units,)] if layer.bias else [])
                out.append((names, shapes))
            elif layer.kind == "batchnorm":
                out.append((["gamma", "beta"], [(shape[0],), (shape[0],)]))
            shape = next_shape
        return out

    def num_params(self):
        return sum(int(np.prod(s)) for _, shapes in self.group_shapes() for s in shapes)


@dataclass
class ParamGroup:
    layer: int
    kind: str
    names: tuple
    tensors: list


@dataclass
class ParamSet:
    """Per-layer parameter groups ``w_1..w_n`` plus batchnorm running buffers."""

    groups: list
    buffers: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.groups)

    def arrays(self):
        return [t for g in self.groups for t in g.tensors]

    def with_arrays(self, arrays):
        arrays = list(arrays)
        groups, pos = [], 0
        for g in self.groups:
            k = len(g.tensors)
            groups.append(replace(g, tensors=list(arrays[pos:pos + k])))
            pos += k
        if pos != len(arrays):
            raise InvalidInputError("array count does not match the parameter set")
        return ParamSet(groups, self.buffers)

    def copy(self):
        return ParamSet(
            [replace(g, tensors=[np.array(t) for t in g.tensors]) for g in self.groups],
            {k: {n: np.array(v) for n, v in b.items()} for k, b in self.buffers.items()})

    def astype(self, dtype):
        out = self.with_arrays([np.asarray(a, dtype=dtype) for a in self.arrays()])
        out.buffers = {k: {n: np.asarray(v, dtype=dtype) for n, v in b.items()}
                       for k, b in self.buffers.items()}
        return out

    @property
    def dtype(self):
        return self.groups[0].tensors[0].dtype if self.groups else np.dtype(np.float64)

    def leaves(self):
        """Fresh leaf nodes (requiring grad) for every tensor, grouped."""
        return [[ad.Node(t, requires_grad=True) for t in g.tensors] for g in self.groups]

    def is_weight(self):
        """Per-group flags marking the weight tensors (not biases/batchnorm)."""
        return [[name == "W" for name in g.names] for g in self.groups]

    def num_params(self):
        return sum(int(np.size(t)) for t in self.arrays())


LayerMask = frozenset


def init_params(spec, scheme="xavier", seed=0, dtype=np.float64):
    """Initial parameters for ``spec``.

    ``scheme`` is ``"xavier"`` (uniform on ±sqrt(6/(fan_in+fan_out))),
    ``"kaiming"`` (normal, std sqrt(2/fan_in)) or ``("normal", mean, std)``.
    Biases start at zero, batchnorm scales at one.
    """
    rng = np.random.default_rng(seed)
    groups = []
    buffers = {}
    for layer_idx, (names, shapes) in zip(spec.param_layers, spec.group_shapes()):
        layer = spec.layers[layer_idx]
        tensors = []
        for name, shape in zip(names, shapes):
            if name == "W":
                if layer.kind == "conv":
                    rf = shape[2] * shape[3]
                    fan_in, fan_out = shape[1] * rf, shape[0] * rf
                else:
                    fan_in, fan_out = shape
                t = _draw(rng, scheme, shape, fan_in, fan_out)
            elif name == "gamma":
                t = np.ones(shape)
            else:
                t = np.zeros(shape)
            tensors.append(t.astype(dtype))
        if layer.kind == "batchnorm":
            buffers[layer_idx] = {"mean": np.zeros(shapes[0], dtype=dtype),
                                  "var": np.ones(shapes[0], dtype=dtype)}
        groups.append(ParamGroup(layer_idx, layer.tag, tuple(names), tensors))
    return ParamSet(groups, buffers)


def _draw(rng, scheme, shape, fan_in, fan_out):
    if scheme == "xavier":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if scheme == "kaiming":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    if isinstance(scheme, (tuple, list)) and len(scheme) == 3 and scheme[0] == "normal":
        return rng.normal(float(scheme[1]), float(scheme[2]), size=shape)
    raise InvalidInputError(f"unknown initialization scheme {scheme!r}")


def select_mask(spec, selector="all"):
    """Group indices taking part in the inner step.

    ``selector`` is ``"all"``, ``"conv_only"``, ``"fc_only"`` or an explicit
    iterable of group indices. The softmax layer counts as fc; batchnorm
    groups are only reachable through ``"all"`` or an explicit list.
    """
    tags = [spec.layers[i].tag for i in spec.param_layers]
    if isinstance(selector, str):
        if selector == "all":
            return LayerMask(range(len(tags)))
        if selector == "conv_only":
            return LayerMask(i for i, t in enumerate(tags) if t == "conv")
        if selector == "fc_only":
            return LayerMask(i for i, t in enumerate(tags) if t == "fc")
        raise InvalidInputError(f"unknown mask selector {selector!r}")
    chosen = LayerMask(int(i) for i in selector)
    bad = sorted(i for i in chosen if not 0 <= i < len(tags))
    if bad:
        raise InvalidInputError(f"mask indices {bad} are not parameterized layers")
    return chosen


def _activate(h, name):
    if name == "relu":
        return ad.relu(h)
    if name == "sigmoid":
        return ad.sigmoid(h)
    if name == "tanh":
        return ad.tanh(h)
    return h


def _as_groups(params, dtype):
    if isinstance(params, ParamSet):
        return [[ad._lift(t, dtype) for t in g.tensors] for g in params.groups]
    return [[t if isinstance(t, ad.Node) else ad._lift(t, dtype) for t in g] for g in params]


def forward(spec, params, x, mode="train", seed=None, buffers=None, stats_out=None):
    """Logits of ``spec`` evaluated at ``params`` on input batch ``x``.

    ``params`` is a :class:`ParamSet` or a sequence of per-group tensor lists
    (arrays or nodes). Dropout is active only in train mode, with masks drawn
    from ``seed``. Batchnorm uses batch statistics in train mode (written to
    ``stats_out`` when given) and the running ``buffers`` in eval mode.
    """
    if mode not in ("train", "eval"):
        raise InvalidInputError(f"mode must be 'train' or 'eval', not {mode!r}")
    if isinstance(params, ParamSet) and buffers is None:
        buffers = params.buffers
    dtype = params.dtype if isinstance(params, ParamSet) else None
    if dtype is None:
        first = params[0][0] if len(params) and len(params[0]) else np.zeros(0)
        dtype = first.dtype
    groups = _as_groups(params, dtype)
    expected = spec.group_shapes()
    if len(groups) != len(expected):
        raise InvalidInputError(f"expected {len(expected)} parameter groups, got {len(groups)}")
    for gi, (group, (_, shapes)) in enumerate(zip(groups, expected)):
        if [tuple(t.shape) for t in group] != [tuple(s) for s in shapes]:
            raise InvalidInputError(f"parameter group {gi} has shapes "
                                    f"{[t.shape for t in group]}, expected {shapes}")

    h = x if isinstance(x, ad.Node) else ad._lift(np.asarray(x), dtype)
    if tuple(h.shape[1:]) != spec.input_shape:
        raise InvalidInputError(f"input shape {h.shape[1:]} does not match {spec.input_shape}")
    rng = np.random.default_rng(0 if seed is None else seed)
    gi = 0
    for li, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind == "conv":
            group = groups[gi]
            gi += 1
            h = ad.conv2d(h, group[0], layer.conv_stride(), layer.conv_pad())
            if layer.bias:
                h = h + ad.reshape(group[1], (1, layer.units, 1, 1))
            h = _activate(h, layer.activation)
        elif kind in ("fc", "softmax"):
            group = groups[gi]
            gi += 1
            if h.ndim > 2:
                h = ad.flatten(h)
            h = ad.matmul(h, group[0])
            if layer.bias:
                h = h + group[1]
            if kind == "fc":
                h = _activate(h, layer.activation)
        elif kind == "maxpool":
            h = ad.max_pool2d(h, layer.window, layer.pool_stride())
        elif kind == "dropout":
            if mode == "train" and layer.p > 0:
                keep = rng.random(h.shape) >= layer.p
                h = h * (keep.astype(dtype) / dtype.type(1.0 - layer.p))
        elif kind == "batchnorm":
            gamma, beta = groups[gi]
            gi += 1
            h = _batchnorm(h, gamma, beta, li, mode, buffers, stats_out)
    return h


def _batchnorm(h, gamma, beta, layer_idx, mode, buffers, stats_out):
    axes = (0, 2, 3) if h.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if h.ndim == 4 else (1, -1)
    if mode == "train":
        mu = ad.mean(h, axes, keepdims=True)
        centered = h - mu
        var = ad.mean(centered * centered, axes, keepdims=True)
        xhat = centered * ad.power(var + BN_EPS, -0.5)
        if stats_out is not None:
            count = int(np.prod([h.shape[a] for a in axes]))
            stats_out[layer_idx] = (mu.value.ravel().copy(), var.value.ravel().copy(), count)
    else:
        if buffers is None or layer_idx not in buffers:
            raise InvalidInputError(f"eval-mode batchnorm at layer {layer_idx} needs running buffers")
        rm = buffers[layer_idx]["mean"].reshape(bshape)
        rv = buffers[layer_idx]["var"].reshape(bshape)
        xhat = (h - rm) * (1.0 / np.sqrt(rv + BN_EPS)).astype(h.dtype)
    return xhat * ad.reshape(gamma, bshape) + ad.reshape(beta, bshape)


def update_running_stats(params, stats):
    """Fold batch statistics collected by :func:`forward` into the buffers."""
    for layer_idx, (mu, var, count) in stats.items():
        buf = params.buffers[layer_idx]
        unbiased = var * (count / max(count - 1, 1))
        buf["mean"] = ((1 - BN_MOMENTUM) * buf["mean"] + BN_MOMENTUM * mu).astype(buf["mean"].dtype)
        buf["var"] = ((1 - BN_MOMENTUM) * buf["var"] + BN_MOMENTUM * unbiased).astype(buf["var"].dtype)


# ---------------------------------------------------------------- presets

_CNETS = {
    "cnet1": [("conv", 256), ("mp",), ("fc", 512)],
    "cnet2": [("conv", 128), ("conv", 128), ("mp",), ("fc", 256)],
    "cnet3": [("conv", 128), ("conv", 128), ("mp",), ("fc", 256), ("fc", 256)],
    "cnet4": [("conv", 128), ("conv", 128), ("mp",), ("conv", 256), ("conv", 256), ("mp",),
              ("conv", 512), ("conv", 512), ("mp",), ("fc", 1024)],
}


def cnet(name, width=1.0, input_shape=(3, 32, 32), num_classes=10, activation="relu"):
    """The VGG-style CNet/CCNet family with every width scaled by ``width``.

    Convolutions are 3×3 and size-preserving; pooling is 2×2 with stride 2.
    """
    key = name.lower().replace("ccnet", "cnet")
    if key not in _CNETS:
        raise InvalidInputError(f"unknown preset {name!r}")
    layers = []
    for item in _CNETS[key]:
        if item[0] == "mp":
            layers.append(LayerSpec("maxpool", window=2))
        else:
            units = max(1, int(round(item[1] * width)))
            layers.append(LayerSpec(item[0], units=units, size=3, activation=activation))
    layers.append(LayerSpec("softmax", units=num_classes))
    return NetworkSpec(tuple(layers), tuple(input_shape), num_classes, name=name)


def mlp(input_dim, hidden, num_classes, activation="relu", name="mlp"):
    layers = [LayerSpec("fc", units=u, activation=activation) for u in hidden]
    layers.append(LayerSpec("softmax", units=num_classes))
    return NetworkSpec(tuple(layers), (input_dim,), num_classes, name=name)
