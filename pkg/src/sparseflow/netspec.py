"""FireNet-style network descriptions, neuron models and the weight file.

A network is an ordered list of :class:`LayerSpec`. Sparsifiable layers are
either ``conv_fatrelu`` (ANN) or ``conv_lif`` (SNN); the last layer is always a
dense 1x1 ``flow_head`` with Softsign. A recurrent layer is a whole rnn-conv
block: forward kernel plus a recurrent kernel applied to the block's own
previous output.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import bf16_bits, bf16_from_bits, bf16_round, dense_conv2d, fatrelu, maxpool2x2, softsign

CONV_FATRELU = "conv_fatrelu"
CONV_LIF = "conv_lif"
FLOW_HEAD = "flow_head"
KINDS = (CONV_FATRELU, CONV_LIF, FLOW_HEAD)

MAGIC = b"SFNW"
FORMAT_VERSION = 1
_FLAG_BIAS, _FLAG_RECURRENT, _FLAG_POOL = 1, 2, 4


class NetworkError(ValueError):
    """A network violates a structural or parameter invariant."""


class WeightFileError(ValueError):
    """Malformed weight file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _bf16(a):
    return None if a is None else bf16_round(np.asarray(a, dtype=np.float32))


@dataclass
class LayerSpec:
    kind: str
    kernel: np.ndarray  # (K, K, Cin, Cout)
    bias: np.ndarray | None = None
    thresholds: np.ndarray | None = None
    leaks: np.ndarray | None = None
    rec_kernel: np.ndarray | None = None  # (K, K, Cout, Cout)
    fused_maxpool: bool = False

    def __post_init__(self):
        self.kernel = _bf16(self.kernel)
        self.bias = _bf16(self.bias)
        self.thresholds = _bf16(self.thresholds)
        self.leaks = _bf16(self.leaks)
        self.rec_kernel = _bf16(self.rec_kernel)

    @property
    def k(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[2]

    @property
    def out_channels(self):
        return self.kernel.shape[3]

    @property
    def recurrent(self):
        return self.rec_kernel is not None

    @property
    def has_bias(self):
        return self.bias is not None

    @property
    def is_spiking(self):
        return self.kind == CONV_LIF

    def parameter_count(self):
        return sum(a.size for a in (self.kernel, self.rec_kernel, self.bias, self.thresholds, self.leaks) if a is not None)

    def validate(self):
        if self.kind not in KINDS:
            raise NetworkError(f"unknown layer kind {self.kind!r}")
        if self.kernel.ndim != 4 or self.kernel.shape[0] != self.kernel.shape[1] or self.k % 2 == 0:
            raise NetworkError(f"kernel must be (K, K, Cin, Cout) with odd K, got {self.kernel.shape}")
        cout = self.out_channels
        for name in ("bias", "thresholds", "leaks"):
            a = getattr(self, name)
            if a is not None and a.shape != (cout,):
                raise NetworkError(f"{name} must have shape ({cout},), got {a.shape}")
        if self.rec_kernel is not None and self.rec_kernel.shape != (self.k, self.k, cout, cout):
            raise NetworkError(f"recurrent kernel shape {self.rec_kernel.shape} does not match the layer")
        if self.recurrent and self.fused_maxpool:
            raise NetworkError("a recurrent block cannot carry a fused max-pool")
        if self.kind == FLOW_HEAD:
            if self.k != 1 or cout != 2:
                raise NetworkError("flow head must be a 1x1 convolution with 2 output channels")
            if self.recurrent or self.fused_maxpool or self.thresholds is not None or self.leaks is not None:
                raise NetworkError("flow head is dense: no recurrence, pooling, thresholds or leaks")
            return
        if self.thresholds is None or not np.all(self.thresholds > 0):
            raise NetworkError("thresholds must be strictly positive")
        if self.kind == CONV_FATRELU:
            if self.bias is None:
                raise NetworkError("ANN conv layers carry biases")
            if self.leaks is not None:
                raise NetworkError("ANN conv layers have no leaks")
        else:
            if self.bias is not None and np.any(self.bias != 0):
                raise NetworkError("SNN conv layers have zero biases")
            if self.leaks is None or not np.all((self.leaks > 0) & (self.leaks < 1)):
                raise NetworkError("LIF leaks must lie in (0, 1)")


@dataclass
class NetworkSpec:
    layers: list = field(default_factory=list)
    height: int = 0  # declared input resolution, 0 = unspecified
    width: int = 0

    @property
    def kind(self):
        return "snn" if any(l.kind == CONV_LIF for l in self.layers) else "ann"

    @property
    def in_channels(self):
        return self.layers[0].in_channels

    def parameter_count(self):
        return sum(l.parameter_count() for l in self.layers)

    def output_shape(self, height, width):
        for layer in self.layers:
            if layer.fused_maxpool:
                if height % 2 or width % 2:
                    raise NetworkError(f"fused max-pool needs even spatial size, got {height}x{width}")
                height, width = height // 2, width // 2
        return height, width

    def validate(self):
        if not self.layers:
            raise NetworkError("network has no layers")
        for i, layer in enumerate(self.layers):
            try:
                layer.validate()
            except NetworkError as exc:
                raise NetworkError(f"layer {i}: {exc}") from None
        if self.layers[-1].kind != FLOW_HEAD:
            raise NetworkError("the last layer must be the flow head")
        if any(l.kind == FLOW_HEAD for l in self.layers[:-1]):
            raise NetworkError("flow head may only appear last")
        kinds = {l.kind for l in self.layers[:-1]}
        if len(kinds) > 1:
            raise NetworkError("sparsifiable layers must be all ANN or all SNN")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_channels != self.layers[i - 1].out_channels:
                raise NetworkError(f"layer {i} expects {self.layers[i].in_channels} channels, gets {self.layers[i - 1].out_channels}")
        return self

    def copy(self):
        layers = [
            LayerSpec(
                l.kind,
                l.kernel.copy(),
                None if l.bias is None else l.bias.copy(),
                None if l.thresholds is None else l.thresholds.copy(),
                None if l.leaks is None else l.leaks.copy(),
                None if l.rec_kernel is None else l.rec_kernel.copy(),
                l.fused_maxpool,
            )
            for l in self.layers
        ]
        return NetworkSpec(layers, self.height, self.width)

    def equals(self, other):
        if (self.height, self.width, len(self.layers)) != (other.height, other.width, len(other.layers)):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind or a.fused_maxpool != b.fused_maxpool:
                return False
            for name in ("kernel", "bias", "thresholds", "leaks", "rec_kernel"):
                x, y = getattr(a, name), getattr(b, name)
                if (x is None) != (y is None):
                    return False
                if x is not None and not np.array_equal(bf16_bits(x), bf16_bits(y)):
                    return False
        return True


# FireNet: input conv, rnn block, 2 convs, rnn block, 2 convs, flow head
FIRENET_RECURRENT = (False, True, False, False, True, False, False)


def firenet(kind="ann", channels=32, in_channels=2, seed=0, threshold=None, leak=0.5, height=0, width=0,
            weight_scale=1.0, bias_scale=0.1):
    """Randomly initialised FireNet of the given kind (``"ann"`` or ``"snn"``)."""
    rng = np.random.default_rng(seed)
    snn = kind == "snn"
    layers = []
    cin = in_channels
    for rec in FIRENET_RECURRENT:
        fan = 9 * cin
        w = rng.uniform(-1, 1, (3, 3, cin, channels)) * weight_scale * np.sqrt(3.0 / fan)
        rw = rng.uniform(-1, 1, (3, 3, channels, channels)) * weight_scale * np.sqrt(3.0 / (9 * channels)) if rec else None
        thr = np.full(channels, 1e-6 if threshold is None and not snn else (threshold or 1.0))
        if snn:
            layers.append(LayerSpec(CONV_LIF, w, None, thr, np.full(channels, leak), rw))
        else:
            b = rng.uniform(-1, 1, channels) * bias_scale
            layers.append(LayerSpec(CONV_FATRELU, w, b, thr, None, rw))
        cin = channels
    head_w = rng.uniform(-1, 1, (1, 1, channels, 2)) * weight_scale * np.sqrt(3.0 / channels)
    layers.append(LayerSpec(FLOW_HEAD, head_w, np.zeros(2)))
    return NetworkSpec(layers, height, width).validate()


def lif_step(v, current, leak, threshold):
    """One integrate-and-fire update. Returns ``(new_voltage, spike)``.

    ``u = v + current``; a neuron with ``u > T`` spikes and resets to 0,
    otherwise it keeps ``leak * u``. All values are BFloat16-rounded.
    """
    leak = np.asarray(leak, dtype=np.float32)
    threshold = np.asarray(threshold, dtype=np.float32)
    if np.any(~((leak > 0) & (leak < 1))):
        raise NetworkError("leak must lie in (0, 1)")
    if np.any(~(threshold > 0)):
        raise NetworkError("threshold must be positive")
    u = bf16_round(np.asarray(v, dtype=np.float32) + np.asarray(current, dtype=np.float32))
    spike = u > threshold
    new_v = np.where(spike, np.float32(0), bf16_round(leak * u)).astype(np.float32)
    return new_v, spike


def lif_fire(u, leak, threshold):
    """Threshold already-integrated membranes; returns ``(new_voltage, spikes as 0/1 floats)``."""
    spike = u > threshold
    new_v = np.where(spike, np.float32(0), bf16_round(leak * u)).astype(np.float32)
    return new_v, spike.astype(np.float32)


def rnn_block_forward(x, h_prev, fwd_weights, rec_weights, thresholds, bias=None, kind="ann",
                      membrane=None, leaks=None):
    """Dense reference of one rnn-conv block for one frame.

    ANN: ``out = FATReLU(conv_rec(h_prev) + conv_fwd(x) + bias)``, ``h_new = out``.
    SNN: the recurrent then forward currents integrate into ``membrane``;
    returns ``(spikes, spikes, new_membrane)``.

    The recurrent convolution accumulates first because on the core it runs
    right after the previous frame, ahead of the next forward pass.
    """
    x = np.asarray(x, dtype=np.float32)
    h_prev = np.asarray(h_prev, dtype=np.float32)
    if x.shape[:2] != h_prev.shape[:2]:
        raise ValueError(f"input {x.shape} and hidden state {h_prev.shape} are not spatially congruent")
    if kind == "ann":
        pre = dense_conv2d(h_prev, rec_weights)
        pre = dense_conv2d(x, fwd_weights, bias=bias, init=pre)
        out = fatrelu(pre, thresholds)
        return out, out
    if membrane is None:
        membrane = np.zeros(x.shape[:2] + (np.shape(fwd_weights)[3],), dtype=np.float32)
    u = dense_conv2d(h_prev, rec_weights, init=membrane)
    u = dense_conv2d(x, fwd_weights, init=u)
    new_v, spikes = lif_fire(u, bf16_round(leaks), bf16_round(thresholds))
    return spikes, spikes, new_v


class ReferenceNetwork:
    """Stateful dense-oracle execution of a :class:`NetworkSpec`, frame by frame.

    This is the composition the depth-first engine must reproduce bit for bit.
    """

    def __init__(self, spec: NetworkSpec, height, width):
        spec.validate()
        self.spec = spec
        self.height, self.width = height, width
        self.reset()

    def reset(self):
        self.pending = []  # recurrent contribution (ANN) or membrane (SNN) per layer
        h, w = self.height, self.width
        for layer in self.spec.layers:
            self.pending.append(np.zeros((h, w, layer.out_channels), dtype=np.float32))
            if layer.fused_maxpool:
                h, w = h // 2, w // 2

    def step(self, counts):
        """Run one frame of per-pixel per-polarity counts; returns the list of layer outputs."""
        x = bf16_round(np.asarray(counts, dtype=np.float32))
        outputs = []
        for i, layer in enumerate(self.spec.layers):
            x, self.pending[i] = reference_layer_step(layer, x, self.pending[i])
            outputs.append(x)
        return outputs


def reference_layer_step(layer: LayerSpec, x, pending):
    """One layer, one frame, dense. ``pending`` is the layer's carried accumulator
    (recurrent contribution or membrane). Returns ``(output, new_pending)``."""
    acc = dense_conv2d(x, layer.kernel, init=pending)
    if layer.has_bias:
        acc = bf16_round(acc + layer.bias)
    if layer.kind == CONV_FATRELU:
        out = fatrelu(acc, layer.thresholds)
        pending = np.zeros_like(acc)
    elif layer.kind == CONV_LIF:
        pending, out = lif_fire(acc, layer.leaks, layer.thresholds)
    else:
        out = softsign(acc)
        pending = np.zeros_like(acc)
    if layer.recurrent:
        pending = dense_conv2d(out, layer.rec_kernel, init=pending)
    if layer.fused_maxpool:
        out = maxpool2x2(out)
    return out, pending


def reference_forward(spec, frames):
    """Run a sequence of count frames through :class:`ReferenceNetwork` from fresh state."""
    frames = [np.asarray(f) for f in frames]
    if not frames:
        return []
    h, w = frames[0].shape[:2]
    net = ReferenceNetwork(spec, h, w)
    return [net.step(f) for f in frames]


# ---------------------------------------------------------------- weight file

_KIND_CODE = {CONV_FATRELU: 0, CONV_LIF: 1, FLOW_HEAD: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def _pack_bf16(a):
    return bf16_bits(np.asarray(a, dtype=np.float32).reshape(-1)).astype("<u2").tobytes()


def dump_network(spec: NetworkSpec) -> bytes:
    spec.validate()
    out = bytearray(MAGIC)
    out += struct.pack("<HHHH", FORMAT_VERSION, len(spec.layers), spec.height, spec.width)
    for layer in spec.layers:
        flags = (_FLAG_BIAS if layer.has_bias else 0) | (_FLAG_RECURRENT if layer.recurrent else 0)
        flags |= _FLAG_POOL if layer.fused_maxpool else 0
        out += struct.pack("<BBHHB", _KIND_CODE[layer.kind], layer.k, layer.in_channels, layer.out_channels, flags)
        out += _pack_bf16(layer.kernel)
        if layer.recurrent:
            out += _pack_bf16(layer.rec_kernel)
        for a in (layer.bias, layer.thresholds, layer.leaks):
            out += struct.pack("<H", 0 if a is None else a.shape[0])
            if a is not None:
                out += _pack_bf16(a)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_network(spec: NetworkSpec, path):
    with open(path, "wb") as fh:
        fh.write(dump_network(spec))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise WeightFileError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def bf16(self, n, what):
        return bf16_from_bits(np.frombuffer(self.take(2 * n, what), dtype="<u2")).copy()


def parse_network(data: bytes) -> NetworkSpec:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError("bad magic, not a weight file", 0)
    version, n_layers, height, width = r.unpack("<HHHH", "header")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported format version {version}", 4)
    layers = []
    for i in range(n_layers):
        at = r.pos
        code, k, cin, cout, flags = r.unpack("<BBHHB", f"layer {i} header")
        if code not in _CODE_KIND:
            raise WeightFileError(f"layer {i} has unknown kind code {code}", at)
        kernel = r.bf16(k * k * cin * cout, f"layer {i} kernel").reshape(k, k, cin, cout)
        rec = None
        if flags & _FLAG_RECURRENT:
            rec = r.bf16(k * k * cout * cout, f"layer {i} recurrent kernel").reshape(k, k, cout, cout)
        arrays = []
        for name in ("bias", "thresholds", "leaks"):
            (n,) = r.unpack("<H", f"layer {i} {name} length")
            if n not in (0, cout):
                raise WeightFileError(f"layer {i} {name} has length {n}, expected 0 or {cout}", r.pos - 2)
            arrays.append(r.bf16(n, f"layer {i} {name}") if n else None)
        if bool(flags & _FLAG_BIAS) != (arrays[0] is not None):
            raise WeightFileError(f"layer {i} bias flag disagrees with stored bias", at)
        layers.append(LayerSpec(_CODE_KIND[code], kernel, *arrays, rec, bool(flags & _FLAG_POOL)))
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise WeightFileError("checksum mismatch", body_end)
    if r.pos != len(data):
        raise WeightFileError("trailing bytes after checksum", r.pos)
    spec = NetworkSpec(layers, height, width)
    spec.validate()
    return spec


def load_network(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        return parse_network(fh.read())
