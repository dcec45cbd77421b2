"""Time and energy accounting for the core cascade.

Every core is one sequential server. For each input packet it decodes the
packet, fires and encodes whatever pixels became final, then integrates the
packet. A packet cannot start before the upstream core finished encoding it
(plus one NoC hop). Camera data is sorted and available at t = 0. Each frame
starts from idle cores; recurrent passes run after a core forwarded its sync.

Absolute numbers depend on the profile. Only the four decode anchors are
measured values; all other unit costs are modelling choices.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import codec, kernels
from .dfengine import NPE_WIDTH, Core
from .netspec import CONV_FATRELU, CONV_LIF, LayerSpec

COUNTERS = (
    "aer_packets",
    "aer_words",
    "bitmask_packets",
    "bitmask_words",
    "bitmask_spikes",
    "state_blocks_rw",
    "vector_ops",
    "pixels_fired",
    "headers_emitted",
    "words_emitted",
    "flow_outputs",
    "syncs",
)

# vector ops per entry and block: multiply, add, round (values) or add, round (binary)
OPS_PER_VALUED_ENTRY = 3
OPS_PER_BINARY_ENTRY = 2
FIRE_OPS = {kernels.MODE_FATRELU: 3, kernels.MODE_LIF: 4, kernels.MODE_SOFTSIGN: 4}


class CausalityError(RuntimeError):
    pass


class ProfileError(ValueError):
    pass


def calibrate_decode_params(anchors):
    """Fit ``t(n) = base + slope * n`` per scheme through two ``(n, t_us)`` anchors each.

    ``anchors`` maps scheme name to a list of points. Returns
    ``{scheme: (base, slope)}``.
    """
    out = {}
    for scheme, pts in anchors.items():
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2 or np.ptp(pts[:, 0]) == 0:
            raise ProfileError(f"{scheme}: need at least two anchors with distinct counts")
        a = np.column_stack([np.ones(len(pts)), pts[:, 0]])
        (base, slope), *_ = np.linalg.lstsq(a, pts[:, 1], rcond=None)
        out[scheme] = (float(base), float(slope))
    return out


def decode_crossover(params, n_max=32):
    """Smallest per-pixel count at which bitmask decoding beats AER, or None."""
    for n in range(1, n_max + 1):
        if params.decode_time(codec.BITMASK, n) < params.decode_time(codec.AER, n):
            return n
    return None


@dataclass(frozen=True)
class CostParams:
    """Unit costs in microseconds (``t_*``) and nanojoules (``e_*``)."""

    t_decode_aer_base: float
    t_decode_aer_per_word: float
    t_decode_bitmask_base: float  # per payload word
    t_decode_bitmask_per_spike: float
    t_state_rw_block: float
    t_npe_op: float
    t_encode_header: float
    t_encode_word: float
    t_flow_out: float
    t_sync: float
    t_noc_hop: float
    e_unit: tuple = ()  # ((counter, nJ), ...)
    name: str = "custom"

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not v >= 0:
                raise ProfileError(f"{f.name} must be non-negative, got {v}")
        units = dict(self.e_unit)
        missing = set(COUNTERS) - set(units)
        if missing:
            raise ProfileError(f"energy units missing for {sorted(missing)}")
        if any(not v >= 0 for v in units.values()):
            raise ProfileError("energy units must be non-negative")

    @property
    def energy_units(self):
        return dict(self.e_unit)

    def decode_time(self, scheme, n, words=None):
        if scheme == codec.AER:
            return self.t_decode_aer_base + self.t_decode_aer_per_word * n
        words = 1 if words is None else words
        return self.t_decode_bitmask_base * words + self.t_decode_bitmask_per_spike * n

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _profiles_text():
    return resources.files("sparseflow").joinpath("data/profiles.json").read_text()


def load_profiles(path=None):
    text = _profiles_text() if path is None else open(path).read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"profile file is not valid JSON: {exc}") from None
    return {name: params_from_dict(name, d) for name, d in raw.items()}


def params_from_dict(name, d):
    d = dict(d)
    anchors = d.pop("decode_anchors", None)
    if anchors is not None:
        fit = calibrate_decode_params(anchors)
        d["t_decode_aer_base"], d["t_decode_aer_per_word"] = fit[codec.AER]
        d["t_decode_bitmask_base"], d["t_decode_bitmask_per_spike"] = fit[codec.BITMASK]
    energy = d.pop("energy_nj", None)
    if energy is None:
        raise ProfileError(f"profile {name!r} has no energy_nj table")
    names = {f.name for f in dataclasses.fields(CostParams)} - {"e_unit", "name"}
    unknown = set(d) - names
    if unknown:
        raise ProfileError(f"profile {name!r}: unknown keys {sorted(unknown)}")
    missing = names - set(d)
    if missing:
        raise ProfileError(f"profile {name!r}: missing keys {sorted(missing)}")
    return CostParams(**{k: float(v) for k, v in d.items()}, e_unit=tuple(sorted(energy.items())), name=name)


def default_params():
    return load_profiles()["default"]


def load_params(path=None, name="default"):
    profiles = load_profiles(path)
    if name not in profiles:
        raise ProfileError(f"no profile named {name!r}; have {sorted(profiles)}")
    return profiles[name]


# ------------------------------------------------------------------ timeline


def _packet_costs(tr, p: CostParams):
    a = tr.arrays()
    v = -(-tr.channels_out // NPE_WIDTH)
    ops = OPS_PER_BINARY_ENTRY if tr.in_binary else OPS_PER_VALUED_ENTRY
    if tr.in_scheme == codec.AER:
        dec = p.t_decode_aer_base + p.t_decode_aer_per_word * a["in_entries"]
    else:
        dec = p.t_decode_bitmask_base * a["in_words"] + p.t_decode_bitmask_per_spike * a["in_entries"]
    blocks = a["in_groups"] * a["in_blocks"] * v
    integ = blocks * (p.t_state_rw_block + 4 * ops * p.t_npe_op)
    rec_blocks = a["rec_groups"] * a["rec_blocks"] * v
    rec_ops = OPS_PER_BINARY_ENTRY if tr.mode == kernels.MODE_LIF else OPS_PER_VALUED_ENTRY
    rec = float(np.sum(rec_blocks * (p.t_state_rw_block + 4 * rec_ops * p.t_npe_op)))
    fire_one = v * (p.t_state_rw_block + FIRE_OPS[tr.mode] * p.t_npe_op)
    if tr.mode == kernels.MODE_SOFTSIGN:
        emit = np.full(len(tr.fire_trigger), p.t_flow_out)
    else:
        n = a["fire_emit_n"]
        emit = np.where(n > 0, p.t_encode_header + p.t_encode_word * a["fire_emit_words"], 0.0)
    counters = dict.fromkeys(COUNTERS, 0)
    if tr.in_scheme == codec.AER:
        counters["aer_packets"] = tr.n_in
        counters["aer_words"] = int(a["in_words"].sum())
    else:
        counters["bitmask_packets"] = tr.n_in
        counters["bitmask_words"] = int(a["in_words"].sum())
        counters["bitmask_spikes"] = int(a["in_entries"].sum())
    n_fired = len(tr.fire_trigger)
    counters["state_blocks_rw"] = int(blocks.sum() + rec_blocks.sum()) + n_fired * v
    counters["vector_ops"] = int(4 * ops * blocks.sum() + 4 * rec_ops * rec_blocks.sum()) + n_fired * v * FIRE_OPS[tr.mode]
    counters["pixels_fired"] = n_fired
    if tr.mode == kernels.MODE_SOFTSIGN:
        counters["flow_outputs"] = n_fired
    else:
        counters["headers_emitted"] = int(np.count_nonzero(a["fire_emit_n"]))
        counters["words_emitted"] = int(a["fire_emit_words"].sum())
    counters["syncs"] = 1
    return a, dec, integ, fire_one, emit, rec, counters


@dataclass
class FrameCost:
    latency_us: float
    total_time_us: float
    energy_uj: float
    core_done_us: list
    intervals: list  # (core, start, end, phase)
    counters: list  # per core dict


def simulate_frame(frame_traces, params: CostParams):
    """Timeline of one frame through the cascade; returns a :class:`FrameCost`."""
    arrivals = None
    sync_arrival = 0.0
    done, intervals, counters = [], [], []
    latency = 0.0
    for c, tr in enumerate(frame_traces):
        a, dec, integ, fire_one, emit_cost, rec, cnt = _packet_costs(tr, params)
        n_in = tr.n_in
        if arrivals is None:
            arrivals = np.zeros(n_in)
        elif len(arrivals) != n_in:
            raise CausalityError(
                f"core {c} consumed {n_in} packets but core {c - 1} emitted {len(arrivals)}")
        trig = a["fire_trigger"]
        if np.any(np.diff(trig) < 0) or (len(trig) and trig[-1] > n_in):
            raise CausalityError(f"core {c}: fire triggers out of order")
        bounds = np.searchsorted(trig, np.arange(n_in + 2), side="left")
        emitted = a["fire_emit_n"] > 0
        emit_times = []
        t = 0.0
        start = None
        last_out = 0.0

        def fire_range(j0, j1, t):
            nonlocal last_out
            for j in range(j0, j1):
                t += fire_one + emit_cost[j]
                if emitted[j] and tr.out_scheme is not None:
                    emit_times.append(t)
                last_out = t
            return t

        for i in range(n_in):
            s = max(t, arrivals[i])
            if start is not None and s > t + 1e-12:
                intervals.append((c, start, t, "forward"))
                start = None
            if start is None:
                start = s
            t = s + dec[i]
            t = fire_range(bounds[i], bounds[i + 1], t)
            t += integ[i]
        s = max(t, sync_arrival)
        if start is not None and s > t + 1e-12:
            intervals.append((c, start, t, "forward"))
            start = None
        if start is None:
            start = s
        t = fire_range(bounds[n_in], len(trig), s)
        t += params.t_sync
        intervals.append((c, start, t, "forward"))
        sync_sent = t
        if rec > 0:
            intervals.append((c, t, t + rec, "recurrent"))
            t += rec
        done.append(t)
        counters.append(cnt)
        if tr.mode == kernels.MODE_SOFTSIGN:
            latency = last_out
        arrivals = np.asarray(emit_times) + params.t_noc_hop
        sync_arrival = sync_sent + params.t_noc_hop
    if frame_traces and frame_traces[-1].mode != kernels.MODE_SOFTSIGN:
        latency = done[-1]
    units = params.energy_units
    energy_nj = sum(cnt[k] * units[k] for cnt in counters for k in COUNTERS)
    return FrameCost(latency, max(done) if done else 0.0, energy_nj / 1000.0, done, intervals, counters)


@dataclass
class CostLedger:
    profile: str
    core_counters: list = field(default_factory=list)  # per core, summed over frames
    frames: list = field(default_factory=list)  # FrameCost per frame

    @property
    def latency_us(self):
        return float(np.mean([f.latency_us for f in self.frames])) if self.frames else 0.0

    @property
    def total_time_us(self):
        return float(np.mean([f.total_time_us for f in self.frames])) if self.frames else 0.0

    @property
    def energy_uj(self):
        return float(sum(f.energy_uj for f in self.frames))

    def events_received(self, core):
        c = self.core_counters[core]
        return c["aer_packets"] + c["bitmask_packets"]

    def words_decoded(self, core):
        c = self.core_counters[core]
        return c["aer_words"] + c["bitmask_words"]

    def events_emitted(self, core):
        return self.core_counters[core]["headers_emitted"]

    def recompute_energy(self, params: CostParams):
        units = params.energy_units
        return sum(c[k] * units[k] for c in self.core_counters for k in COUNTERS) / 1000.0


def simulate_timeline(traces, params: CostParams | None = None):
    """Cost every frame of a run; ``traces`` is a per-frame list of per-core traces."""
    params = params or default_params()
    ledger = CostLedger(params.name)
    for frame_traces in traces:
        fc = simulate_frame(frame_traces, params)
        ledger.frames.append(fc)
        if not ledger.core_counters:
            ledger.core_counters = [dict.fromkeys(COUNTERS, 0) for _ in fc.counters]
        for acc, cnt in zip(ledger.core_counters, fc.counters):
            for k in COUNTERS:
                acc[k] += cnt[k]
    return ledger


# ------------------------------------------------------------------ reports


def _fmt(x):
    return repr(float(x))


def report_rows(ledger: CostLedger):
    rows = [("summary", "", "latency_us", _fmt(ledger.latency_us)),
            ("summary", "", "total_time_us", _fmt(ledger.total_time_us)),
            ("summary", "", "energy_uj", _fmt(ledger.energy_uj))]
    for f, fc in enumerate(ledger.frames):
        rows.append(("frame", f, "latency_us", _fmt(fc.latency_us)))
        rows.append(("frame", f, "total_time_us", _fmt(fc.total_time_us)))
        rows.append(("frame", f, "energy_uj", _fmt(fc.energy_uj)))
    for c, cnt in enumerate(ledger.core_counters):
        for k in COUNTERS:
            rows.append(("core", c, k, str(cnt[k])))
    return rows


def write_report_csv(path, ledger: CostLedger, header_lines=()):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("scope,index,key,value\n")
        for row in report_rows(ledger):
            fh.write(",".join(str(x) for x in row) + "\n")


def write_intervals_csv(path, ledger: CostLedger, header_lines=()):
    """Per-core busy intervals, one row each: ``frame,core,start_us,end_us,phase``."""
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("frame,core,start_us,end_us,phase\n")
        for f, fc in enumerate(ledger.frames):
            for core, s, e, phase in fc.intervals:
                fh.write(f"{f},{core},{_fmt(s)},{_fmt(e)},{phase}\n")


def report_json(ledger: CostLedger, extra=None):
    doc = {
        "profile": ledger.profile,
        "latency_us": ledger.latency_us,
        "total_time_us": ledger.total_time_us,
        "energy_uj": ledger.energy_uj,
        "frames": [
            {
                "latency_us": fc.latency_us,
                "total_time_us": fc.total_time_us,
                "energy_uj": fc.energy_uj,
                "core_done_us": fc.core_done_us,
                "intervals": [list(iv) for iv in fc.intervals],
            }
            for fc in ledger.frames
        ],
        "cores": ledger.core_counters,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True)


# ------------------------------------------------------------------ controlled sweep

SWEEP_PIXELS = (0, 50, 102, 151, 204)
SWEEP_COUNTS = (1, 4, 6, 10)
SWEEP_COUNT_PIXELS = 151


def single_layer_cost(kind, active, per_pixel, params=None, size=16, channels=32, seed=0):
    """Cost of one 3x3 layer (``size x size x channels``) fed ``per_pixel`` ac./sp. at ``active`` pixels.

    Thresholds are set out of reach so the layer itself stays silent; what is
    measured is the receiving core's work.
    """
    params = params or default_params()
    rng = np.random.default_rng(seed)
    w = rng.uniform(-0.1, 0.1, (3, 3, channels, channels))
    big = np.full(channels, 1e30)
    if kind == "snn":
        layer = LayerSpec(CONV_LIF, w, None, big, np.full(channels, 0.5))
        scheme = codec.BITMASK
    else:
        layer = LayerSpec(CONV_FATRELU, w, np.zeros(channels), big)
        scheme = codec.AER
    core = Core(0, layer, size, size, scheme, scheme, kind == "snn")
    pix = np.sort(rng.permutation(size * size)[:active])
    core.begin_frame(0)
    for p in pix:
        chans = np.sort(rng.choice(channels, per_pixel, replace=False))
        vals = np.ones(per_pixel, np.float32) if kind == "snn" else rng.uniform(0.5, 2, per_pixel).astype(np.float32)
        y, x = divmod(int(p), size)
        core.receive(y, x, chans, vals, codec.words_per_pixel(per_pixel, scheme, channels))
    core.sync()
    return simulate_frame([core.trace], params)


def controlled_sweep(params=None, seed=0):
    """Rows ``(kind, sweep, active_pixels, per_pixel, acsp, time_us, energy_uj)``."""
    rows = []
    for kind in ("ann", "snn"):
        for p in SWEEP_PIXELS:
            fc = single_layer_cost(kind, p, 1, params, seed=seed)
            rows.append((kind, "pixels", p, 1, p, fc.total_time_us, fc.energy_uj))
        for n in SWEEP_COUNTS:
            fc = single_layer_cost(kind, SWEEP_COUNT_PIXELS, n, params, seed=seed)
            rows.append((kind, "count", SWEEP_COUNT_PIXELS, n, SWEEP_COUNT_PIXELS * n, fc.total_time_us, fc.energy_uj))
    return rows
