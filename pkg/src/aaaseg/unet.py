"""Encoder-decoder segmentation network built from the ``ndtensor`` primitives.

Topology for ``depth`` pooling stages and base width ``F``::

    enc L   : (conv3x3 + relu) x 2, maxpool        L = 0 .. depth-1
    bott    : (conv3x3 + relu) x 2
    dec L   : deconv2x2, concat skip, (conv3x3 + relu) x 2
    out     : conv1x1 -> 2 channels, softmax

Layers are counted as convolutions + pools + deconvolutions + the output
conv + softmax, which gives ``6 * depth + 4`` (34 for depth 5, 28 for 4).
"""
import struct
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, FormatError, ShapeError, TruncatedFileError, UsageError

CHECKPOINT_MAGIC = b"UNET"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetSpec:
    depth: int
    base_features: int
    in_channels: int = 1
    out_channels: int = 2
    feature_cap: int = 1024

    def __post_init__(self):
        for name in ("depth", "base_features", "in_channels", "out_channels", "feature_cap"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"UNetSpec.{name} must be a positive integer")
        if self.in_channels != 1 or self.out_channels != 2:
            raise ConfigError("only single-channel input and two-class output are supported")

    def features(self, level):
        return min(self.base_features * 2 ** level, self.feature_cap)

    @property
    def counted_layers(self):
        return len(self.layer_kinds())

    def layer_kinds(self):
        """Counted layers in topology order, as kind strings."""
        kinds = []
        for _ in range(self.depth):
            kinds += ["conv", "conv", "pool"]
        kinds += ["conv", "conv"]
        for _ in range(self.depth):
            kinds += ["deconv", "conv", "conv"]
        kinds += ["conv", "softmax"]
        return kinds

    def check_input(self, h, w):
        m = 2 ** self.depth
        if h % m or w % m:
            raise ShapeError(f"input {h}x{w} is not divisible by 2**depth = {m}")


PRESETS = {
    "u34": UNetSpec(depth=5, base_features=64),
    "u28": UNetSpec(depth=4, base_features=64),
    "desk": UNetSpec(depth=3, base_features=8),
}


def layer_layout(spec):
    """Ordered ``(name, kind, out_c, in_c, k)`` for every parametrised layer."""
    f = spec.features
    layout = []
    prev = spec.in_channels
    for lvl in range(spec.depth):
        layout.append((f"enc{lvl}.conv1", "conv", f(lvl), prev, 3))
        layout.append((f"enc{lvl}.conv2", "conv", f(lvl), f(lvl), 3))
        prev = f(lvl)
    layout.append(("bott.conv1", "conv", f(spec.depth), prev, 3))
    layout.append(("bott.conv2", "conv", f(spec.depth), f(spec.depth), 3))
    for lvl in reversed(range(spec.depth)):
        layout.append((f"dec{lvl}.up", "deconv", f(lvl), f(lvl + 1), 2))
        layout.append((f"dec{lvl}.conv1", "conv", f(lvl), 2 * f(lvl), 3))
        layout.append((f"dec{lvl}.conv2", "conv", f(lvl), f(lvl), 3))
    layout.append(("out", "conv", spec.out_channels, f(0), 1))
    return layout


class UNetParams:
    """Ordered parameter set for one network.

    ``version`` is bumped by every in-place update so that a forward cache
    made before the update is refused by ``backward``.
    """

    def __init__(self, spec, layers):
        self.spec = spec
        self.layers = dict(layers)
        self.version = 0

    def __getitem__(self, name):
        return self.layers[name]

    def names(self):
        return list(self.layers)

    def arrays(self):
        """Flat list of parameter arrays, weights then bias per layer."""
        out = []
        for p in self.layers.values():
            out += [p.weights, p.bias]
        return out

    def tensors(self):
        """(name, array) records in serialization order."""
        for name, p in self.layers.items():
            yield f"{name}.weights", p.weights
            yield f"{name}.bias", p.bias

    def bump(self):
        self.version += 1

    def copy(self):
        layers = {n: nd.ConvParams(p.weights.copy(), p.bias.copy(), p.stride, p.pad)
                  for n, p in self.layers.items()}
        return UNetParams(self.spec, layers)

    def num_parameters(self):
        return sum(a.size for a in self.arrays())


def build(spec, seed=0, dtype=np.float32):
    """He-initialised parameters (std sqrt(2 / fan_in), zero bias) from a seeded generator."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, kind, out_c, in_c, k in layer_layout(spec):
        fan_in = in_c if kind == "deconv" else in_c * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k)).astype(dtype)
        b = np.zeros(out_c, dtype=dtype)
        if kind == "deconv":
            layers[name] = nd.ConvParams(w, b, stride=2, pad=0)
        else:
            layers[name] = nd.ConvParams(w, b, stride=1, pad=k // 2)
    return UNetParams(spec, layers)


@dataclass
class ForwardCache:
    params_id: int
    version: int
    records: dict
    probs: np.ndarray


def _conv_relu(params, name, x, rec):
    z = nd.conv2d_forward(x, params[name])
    a = nd.relu_forward(z)
    rec[name] = (x, a)
    return a


def forward(params, x, keep_cache=False):
    """Per-pixel class probabilities ``(n, 2, h, w)`` for input ``(n, 1, h, w)``.

    With ``keep_cache`` the intermediate activations are returned as well, for
    use by ``backward``.
    """
    spec = params.spec
    x = nd.as_tensor4(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input shape {x.shape} does not have {spec.in_channels} channel(s)")
    spec.check_input(*x.shape[2:])
    rec = {}
    skips = []
    h = x
    for lvl in range(spec.depth):
        h = _conv_relu(params, f"enc{lvl}.conv1", h, rec)
        h = _conv_relu(params, f"enc{lvl}.conv2", h, rec)
        skips.append(h)
        h, amap = nd.maxpool2_forward(h)
        rec[f"enc{lvl}.pool"] = amap
    h = _conv_relu(params, "bott.conv1", h, rec)
    h = _conv_relu(params, "bott.conv2", h, rec)
    for lvl in reversed(range(spec.depth)):
        up = nd.deconv2_forward(h, params[f"dec{lvl}.up"])
        rec[f"dec{lvl}.up"] = (h, None)
        h = nd.concat_channels(skips[lvl], up)
        h = _conv_relu(params, f"dec{lvl}.conv1", h, rec)
        h = _conv_relu(params, f"dec{lvl}.conv2", h, rec)
    logits = nd.conv2d_forward(h, params["out"])
    rec["out"] = (h, None)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits in forward pass")
    probs = nd.softmax_channels(logits)
    if keep_cache:
        return probs, ForwardCache(id(params), params.version, rec, probs)
    return probs


def backward(params, cache, grad_logits):
    """Gradients for every parameter, as a dict ``name -> {"weights", "bias"}``.

    ``grad_logits`` is the loss gradient with respect to the pre-softmax
    logits (``P - G`` for the cross-entropy loss).
    """
    if cache.params_id != id(params) or cache.version != params.version:
        raise UsageError("forward cache is stale: parameters changed since the forward pass")
    spec = params.spec
    rec = cache.records
    if grad_logits.shape != cache.probs.shape:
        raise ShapeError(f"grad_logits shape {grad_logits.shape} does not match output {cache.probs.shape}")
    grads = {}

    def conv_back(name, g, relu=True):
        x, a = rec[name]
        if relu:
            g = nd.relu_backward(a, g)
        lg = nd.conv2d_backward(x, params[name], g)
        grads[name] = lg.param_grads
        return lg.input_grad

    g = conv_back("out", grad_logits, relu=False)
    skip_grads = {}
    for lvl in range(spec.depth):
        g = conv_back(f"dec{lvl}.conv2", g)
        g = conv_back(f"dec{lvl}.conv1", g)
        g_skip, g_up = nd.concat_backward(g, spec.features(lvl))
        skip_grads[lvl] = g_skip
        x_up = rec[f"dec{lvl}.up"][0]
        lg = nd.deconv2_backward(x_up, params[f"dec{lvl}.up"], np.ascontiguousarray(g_up))
        grads[f"dec{lvl}.up"] = lg.param_grads
        g = lg.input_grad
    g = conv_back("bott.conv2", g)
    g = conv_back("bott.conv1", g)
    for lvl in reversed(range(spec.depth)):
        g = nd.maxpool2_backward(rec[f"enc{lvl}.pool"], g) + skip_grads[lvl]
        g = conv_back(f"enc{lvl}.conv2", g)
        g = conv_back(f"enc{lvl}.conv1", g)
    return {name: grads[name] for name in params.names()}


def grad_arrays(params, grads):
    """Flatten a ``backward`` result in the order of ``params.arrays()``."""
    out = []
    for name in params.names():
        out += [grads[name]["weights"], grads[name]["bias"]]
    return out


# -- checkpoints -------------------------------------------------------------

_SPEC_FIELDS = ("depth", "base_features", "in_channels", "out_channels", "feature_cap")


def save(params, path):
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<5I", *(getattr(params.spec, f) for f in _SPEC_FIELDS))
    records = list(params.tensors())
    buf += struct.pack("<I", len(records))
    for name, arr in records:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def load(path, spec=None):
    """Read a checkpoint; with ``spec`` given, tensors must match its layout."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a UNET checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    stored = UNetSpec(**dict(zip(_SPEC_FIELDS, r.u32(5))))
    target = spec or stored
    expected = []
    for name, kind, out_c, in_c, k in layer_layout(target):
        expected.append((f"{name}.weights", (out_c, in_c, k, k)))
        expected.append((f"{name}.bias", (out_c,)))
    count = r.u32()
    tensors = []
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        dims = (r.u32(ndim),) if ndim == 1 else tuple(r.u32(ndim)) if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        tensors.append((name, arr))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after last tensor")
    for i, (name, shape) in enumerate(expected):
        if i >= len(tensors):
            raise ShapeError(f"checkpoint is missing tensor {name} {shape}")
        got_name, arr = tensors[i]
        if got_name != name or arr.shape != shape:
            raise ShapeError(
                f"first mismatching tensor: expected {name} {shape}, checkpoint has {got_name} {arr.shape}")
    if len(tensors) != len(expected):
        raise ShapeError(f"checkpoint has extra tensor {tensors[len(expected)][0]}")
    layers = {}
    it = iter(arr for _, arr in tensors)
    for name, kind, _, _, k in layer_layout(target):
        w, b = next(it), next(it)
        if kind == "deconv":
            layers[name] = nd.ConvParams(w, b, stride=2, pad=0)
        else:
            layers[name] = nd.ConvParams(w, b, stride=1, pad=k // 2)
    return UNetParams(target, layers)
