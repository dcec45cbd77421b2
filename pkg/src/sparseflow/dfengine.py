"""Event-driven depth-first convolution on a cascade of simulated cores.

Each layer of a :class:`~sparseflow.netspec.NetworkSpec` runs on its own
:class:`Core`. A core consumes pixel packets in row-major order. When a packet
for pixel ``(x, y)`` arrives, every output pixel that no later input can reach
fires first (rows ``<= y - r - 1`` and row ``y - r`` up to column ``x - r - 1``,
``r = K // 2``); then the packet is integrated group by group. The end-of-frame
sync fires whatever is left. ANN feed-forward layers keep only ``K + 1`` rows
of partial sums; SNN layers and recurrent blocks keep the whole map.

Numerics do not depend on timing. Every core records a :class:`FrameTrace` of
what it did, and :mod:`sparseflow.costsim` turns the traces into time and
energy afterwards.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from . import codec, kernels
from .netspec import CONV_FATRELU, CONV_LIF, FLOW_HEAD, NetworkSpec
from .tensorcore import bf16_round

GROUP_SIZE = 4
NPE_WIDTH = 8
BYTES_PER_STATE = 2
DEFAULT_CORE_MEMORY = 2 * 1024 * 1024


class OrderError(RuntimeError):
    """Input packets violated the sorted row-major stream contract."""


class MemoryBudgetError(RuntimeError):
    """A layer does not fit into one core's data memory at this resolution."""


@dataclass
class SpikeGroup:
    """Up to four same-pixel entries that share one load/store of neuron states."""

    y: int
    x: int
    chans: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        if len(self.chans) > GROUP_SIZE:
            raise ValueError(f"a group holds at most {GROUP_SIZE} entries")

    def padded(self):
        """Entries padded with dummy zeros to the full group size."""
        pad = GROUP_SIZE - len(self.chans)
        chans = np.concatenate([self.chans, np.zeros(pad, dtype=np.int64)])
        vals = np.concatenate([self.vals, np.zeros(pad, dtype=np.float32)])
        return chans, vals


def make_groups(y, x, chans, vals):
    chans = np.asarray(chans, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float32)
    return [SpikeGroup(y, x, chans[i : i + GROUP_SIZE], vals[i : i + GROUP_SIZE]) for i in range(0, len(chans), GROUP_SIZE)]


def n_groups(n):
    return -(-n // GROUP_SIZE)


def n_vectors(channels):
    return -(-channels // NPE_WIDTH)


class RowBuffer:
    """Neuron states for one layer: a ring of ``rows`` image rows (or the full map).

    Tracks which image row owns each slot so that integrating into a row that
    is not resident (because an older row still holds the slot) is caught.
    """

    def __init__(self, rows, height, width, channels):
        self.rows = rows
        self.height, self.width = height, width
        self.state = np.zeros((rows, width, channels), dtype=np.float32)
        self.owner = np.full(rows, -1, dtype=np.int64)
        self.scratch = kernels.Scratch(channels)
        self.peak_resident = 0

    def _admit(self, row):
        slot = row % self.rows
        if self.owner[slot] == row:
            return
        if self.owner[slot] != -1:
            raise OrderError(f"row {row} needs slot {slot} still held by row {self.owner[slot]}")
        self.owner[slot] = row
        self.peak_resident = max(self.peak_resident, int(np.count_nonzero(self.owner >= 0)))

    def release_row(self, row):
        slot = row % self.rows
        if self.owner[slot] == row:
            self.owner[slot] = -1

    def resident_rows(self):
        return sorted(int(r) for r in self.owner if r >= 0)

    def touched_blocks(self, y, x, k):
        r = k // 2
        ny = min(y + r, self.height - 1) - max(y - r, 0) + 1
        nx = min(x + r, self.width - 1) - max(x - r, 0) + 1
        return ny * nx

    def integrate_group(self, group: SpikeGroup, kernel):
        """Load the K x K target pixels once, apply all group entries, store once.

        Returns the number of touched pixel blocks (one read and one write each).
        """
        k = kernel.shape[0]
        r = k // 2
        for row in range(max(group.y - r, 0), min(group.y + r, self.height - 1) + 1):
            self._admit(row)
        kernels.integrate(self.state, group.y, group.x, group.chans, group.vals, kernel, self.height, self.width, self.scratch)
        return self.touched_blocks(group.y, group.x, k)

    def fire(self, p0, p1, mode, bias, thresholds, leaks):
        return kernels.fire(self.state, p0, p1, self.width, mode, bias, thresholds, leaks, self.scratch)


@dataclass
class FrameTrace:
    """What one core did for one frame, in processing order.

    Input packet ``i`` has ``in_entries[i]`` ac./sp. in ``in_words[i]`` payload
    words, was integrated as ``in_groups[i]`` groups over ``in_blocks[i]``
    target pixels. Fired pixel ``j`` was triggered by input packet
    ``fire_trigger[j]`` (``n_in`` for the sync) and emitted ``fire_emit_n[j]``
    ac./sp. in ``fire_emit_words[j]`` words (0 if silent).
    """

    core: int
    frame: int
    in_scheme: str
    in_binary: bool
    out_scheme: str | None
    channels_in: int
    channels_out: int
    kernel: int
    mode: int
    in_entries: list = field(default_factory=list)
    in_words: list = field(default_factory=list)
    in_groups: list = field(default_factory=list)
    in_blocks: list = field(default_factory=list)
    fire_trigger: list = field(default_factory=list)
    fire_emit_n: list = field(default_factory=list)
    fire_emit_words: list = field(default_factory=list)
    rec_groups: list = field(default_factory=list)
    rec_blocks: list = field(default_factory=list)

    @property
    def n_in(self):
        return len(self.in_entries)

    def arrays(self):
        return {k: np.asarray(getattr(self, k), dtype=np.int64) for k in (
            "in_entries", "in_words", "in_groups", "in_blocks", "fire_trigger",
            "fire_emit_n", "fire_emit_words", "rec_groups", "rec_blocks")}


_MODES = {CONV_FATRELU: kernels.MODE_FATRELU, CONV_LIF: kernels.MODE_LIF, FLOW_HEAD: kernels.MODE_SOFTSIGN}


class Core:
    """One simulated core running one layer (or one rnn-conv block)."""

    def __init__(self, index, layer, height, width, in_scheme, out_scheme, in_binary,
                 memory_bytes=DEFAULT_CORE_MEMORY):
        self.index = index
        self.layer = layer
        self.height, self.width = height, width
        self.in_scheme, self.out_scheme = in_scheme, out_scheme
        self.in_binary = in_binary
        self.mode = _MODES[layer.kind]
        self.k = layer.k
        self.r = layer.k // 2
        self.cout = layer.out_channels
        full = layer.kind == CONV_LIF or layer.recurrent
        rows = height if full else min(self.k + 1, height)
        need = self.memory_required(rows)
        if need > memory_bytes:
            raise MemoryBudgetError(
                f"core {index} ({layer.kind}) needs {need} bytes at {height}x{width}, budget is {memory_bytes}")
        self.buffer = RowBuffer(rows, height, width, self.cout)
        if layer.fused_maxpool:
            self.pool = np.zeros((width // 2, self.cout), dtype=np.float32)
        self.frame = -1

    def memory_required(self, rows):
        lay = self.layer
        weights = lay.kernel.size + (lay.rec_kernel.size if lay.recurrent else 0)
        vectors = sum(a.size for a in (lay.bias, lay.thresholds, lay.leaks) if a is not None)
        return BYTES_PER_STATE * (rows * self.width * self.cout + weights + vectors)

    @property
    def out_shape(self):
        if self.layer.fused_maxpool:
            return self.height // 2, self.width // 2
        return self.height, self.width

    def begin_frame(self, frame):
        self.frame = frame
        self.next_fire = 0
        self.last_pixel = -1
        self.trace = FrameTrace(self.index, frame, self.in_scheme, self.in_binary, self.out_scheme,
                                self.layer.in_channels, self.cout, self.k, self.mode)
        self.emitted = []
        if self.layer.fused_maxpool:
            self.pool[:] = 0

    # -- firing ---------------------------------------------------------------

    def fire_ready_pixels(self, y, x, trigger):
        """Fire every pixel no input at or after ``(x, y)`` can still reach."""
        frontier = (y - self.r) * self.width + max(x - self.r, 0)
        self._fire_upto(min(max(frontier, 0), self.height * self.width), trigger)

    def _fire_upto(self, end, trigger):
        if end <= self.next_fire:
            return
        p0 = self.next_fire
        lay = self.layer
        out = self.buffer.fire(p0, end, self.mode, lay.bias, lay.thresholds, lay.leaks)
        tr = self.trace
        w = self.width
        for j in range(end - p0):
            p = p0 + j
            y, x = divmod(p, w)
            n_emit, n_words = 0, 0
            if lay.fused_maxpool:
                np.maximum(self.pool[x // 2], out[j], out=self.pool[x // 2])
                if y % 2 == 1 and x % 2 == 1:
                    n_emit, n_words = self._emit(y // 2, x // 2, self.pool[x // 2])
                    self.pool[x // 2] = 0
            else:
                n_emit, n_words = self._emit(y, x, out[j])
            tr.fire_trigger.append(trigger)
            tr.fire_emit_n.append(n_emit)
            tr.fire_emit_words.append(n_words)
            if x == w - 1 and self.buffer.rows < self.height:
                self.buffer.release_row(y)
        self.next_fire = end

    def _emit(self, y, x, vec):
        if self.mode == kernels.MODE_SOFTSIGN:
            chans = np.arange(self.cout)
            self.emitted.append((y, x, chans, vec.copy()))
            return self.cout, 0
        chans = np.flatnonzero(vec)
        if chans.size == 0:
            return 0, 0
        self.emitted.append((y, x, chans, vec[chans].copy()))
        return chans.size, codec.words_per_pixel(chans.size, self.out_scheme, self.cout)

    # -- input ------------------------------------------------------------------

    def receive(self, y, x, chans, vals, n_words):
        """Process one decoded pixel packet."""
        p = y * self.width + x
        if not (0 <= y < self.height and 0 <= x < self.width):
            raise OrderError(f"core {self.index}: pixel ({x}, {y}) outside {self.width}x{self.height}")
        if p <= self.last_pixel:
            raise OrderError(f"core {self.index}: pixel ({x}, {y}) arrived after pixel index {self.last_pixel}")
        self.last_pixel = p
        i = self.trace.n_in
        self.fire_ready_pixels(y, x, i)
        blocks = 0
        groups = make_groups(y, x, chans, vals)
        for g in groups:
            blocks = self.buffer.integrate_group(g, self.layer.kernel)
        tr = self.trace
        tr.in_entries.append(len(chans))
        tr.in_words.append(n_words)
        tr.in_groups.append(len(groups))
        tr.in_blocks.append(blocks)

    def sync(self):
        """End of frame: fire all remaining pixels, then run the recurrent pass."""
        self._fire_upto(self.height * self.width, self.trace.n_in)
        if self.layer.recurrent:
            for y, x, chans, vals in self.emitted:
                for g in make_groups(y, x, chans, vals):
                    blocks = self.buffer.integrate_group(g, self.layer.rec_kernel)
                    self.trace.rec_groups.append(1)
                    self.trace.rec_blocks.append(blocks)
        return self.emitted


@dataclass
class EngineConfig:
    scheme: str | None = None  # inter-core scheme; None = AER for ANN, bitmask for SNN
    memory_bytes: int = DEFAULT_CORE_MEMORY
    threads: bool = False
    cost_params: object = None  # costsim.CostParams; None = default profile


@dataclass
class RunResult:
    flows: list  # per frame (H, W, 2) float32
    layer_outputs: list  # per frame: list of dense per-layer outputs (input counts first)
    traces: list  # per frame: list of FrameTrace, one per core
    ledger: object = None
    peak_resident_rows: list = field(default_factory=list)


def default_scheme(spec):
    return codec.BITMASK if spec.kind == "snn" else codec.AER


def build_cores(spec: NetworkSpec, height, width, scheme, memory_bytes=DEFAULT_CORE_MEMORY):
    spec.validate()
    if scheme not in codec.SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if spec.kind == "ann" and scheme == codec.BITMASK:
        raise ValueError("the bitmask scheme carries binary spikes; ANN activations need AER")
    cores = []
    h, w = height, width
    in_scheme, in_binary = codec.AER, False  # camera counts travel as AER values
    for i, layer in enumerate(spec.layers):
        out_scheme = None if layer.kind == FLOW_HEAD else scheme
        core = Core(i, layer, h, w, in_scheme, out_scheme, in_binary, memory_bytes)
        cores.append(core)
        h, w = core.out_shape
        in_scheme, in_binary = out_scheme, layer.kind == CONV_LIF
    return cores


def frame_packets(counts):
    """Row-major pixel packets of an event frame (channel = polarity, value = count)."""
    counts = np.asarray(counts)
    h, w, c = counts.shape
    vals = bf16_round(counts.astype(np.float32))
    nz = np.flatnonzero(np.any(counts != 0, axis=2))
    packets = []
    for p in nz:
        y, x = divmod(int(p), w)
        chans = np.flatnonzero(counts[y, x])
        packets.append((y, x, chans, vals[y, x, chans]))
    return packets


def _dense(packets, h, w, c):
    out = np.zeros((h, w, c), dtype=np.float32)
    for y, x, chans, vals in packets:
        out[y, x, chans] = vals
    return out


def _wire(packets, scheme, channels):
    """Encode then decode a core's output, as the receiving core sees it."""
    words = codec.encode_stream(packets, scheme, channels)
    decoded, synced = codec.decode_stream(words, scheme, channels)
    assert synced
    return [(y, x, c, v, codec.words_per_pixel(len(c), scheme, channels)) for y, x, c, v in decoded]


def _run_frame_serial(cores, counts, frame):
    inputs = [(y, x, c, v, len(c)) for y, x, c, v in frame_packets(counts)]
    outputs = []
    for core in cores:
        core.begin_frame(frame)
        for y, x, c, v, nw in inputs:
            core.receive(y, x, c, v, nw)
        emitted = core.sync()
        outputs.append(emitted)
        if core.out_scheme is not None:
            inputs = _wire(emitted, core.out_scheme, core.cout)
    return outputs


_SYNC = object()


def _run_frame_threaded(cores, counts, frame):
    """Pipelined variant: one thread per core, connected by FIFO queues of words."""
    queues = [queue.Queue() for _ in range(len(cores) + 1)]
    outputs = [None] * len(cores)
    errors = []

    def worker(i, core):
        try:
            core.begin_frame(frame)
            q_in, q_out = queues[i], queues[i + 1]
            sent = 0
            while True:
                item = q_in.get()
                if item is _SYNC:
                    break
                y, x, c, v, nw = item
                core.receive(y, x, c, v, nw)
                sent = _forward(core, sent, q_out)
            core.sync()
            _forward(core, sent, q_out)
            q_out.put(_SYNC)
            outputs[i] = core.emitted
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)
            queues[i + 1].put(_SYNC)

    threads = [threading.Thread(target=worker, args=(i, c), daemon=True) for i, c in enumerate(cores)]
    for t in threads:
        t.start()
    for y, x, c, v in frame_packets(counts):
        queues[0].put((y, x, c, v, len(c)))
    queues[0].put(_SYNC)
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return outputs


def _forward(core, sent, q_out):
    # the recurrent pass runs after sync; everything emitted before it is forwarded
    for y, x, c, v in core.emitted[sent:]:
        if core.out_scheme is None:
            continue
        words = codec.encode_packet(y, x, c, v, core.out_scheme, core.cout)
        packets, _ = codec.decode_stream(words, core.out_scheme, core.cout)
        (py, px, pc, pv), = packets
        q_out.put((py, px, pc, pv, len(words) - 1))
    return len(core.emitted)


def run_network(frames, spec: NetworkSpec, scheme=None, config: EngineConfig | None = None):
    """Run event frames through the core cascade.

    Returns a :class:`RunResult` with flow predictions, dense per-layer
    ac./sp. logs, per-core traces and the :class:`~sparseflow.costsim.CostLedger`.
    """
    from . import costsim

    config = config or EngineConfig()
    scheme = scheme or config.scheme or default_scheme(spec)
    frames = [np.asarray(f.counts if hasattr(f, "counts") else f) for f in frames]
    if not frames:
        return RunResult([], [], [], costsim.simulate_timeline([], config.cost_params))
    h, w = frames[0].shape[:2]
    if spec.in_channels != frames[0].shape[2]:
        raise ValueError(f"frames have {frames[0].shape[2]} channels, network expects {spec.in_channels}")
    cores = build_cores(spec, h, w, scheme, config.memory_bytes)
    result = RunResult([], [], [])
    for f, counts in enumerate(frames):
        if counts.shape[:2] != (h, w):
            raise ValueError(f"frame {f} is {counts.shape[:2]}, expected {(h, w)}")
        run = _run_frame_threaded if config.threads else _run_frame_serial
        emitted = run(cores, counts, f)
        layers = [bf16_round(counts.astype(np.float32))]
        for core, packets in zip(cores, emitted):
            oh, ow = core.out_shape
            layers.append(_dense(packets, oh, ow, core.cout))
        result.layer_outputs.append(layers)
        result.flows.append(layers[-1])
        result.traces.append([c.trace for c in cores])
    result.peak_resident_rows = [c.buffer.peak_resident for c in cores]
    result.ledger = costsim.simulate_timeline(result.traces, config.cost_params)
    return result


def write_activity_log(path, layer_outputs):
    """CSV dump of every nonzero ac./sp.: ``frame,layer,y,x,channel,value``."""
    with open(path, "w") as fh:
        fh.write("frame,layer,y,x,channel,value\n")
        for f, layers in enumerate(layer_outputs):
            for li, t in enumerate(layers):
                ys, xs, cs = np.nonzero(t)
                for y, x, c in zip(ys, xs, cs):
                    fh.write(f"{f},{li},{y},{x},{c},{float(t[y, x, c])!r}\n")
