"""Deterministic generation of the bundled example networks and event files.

``profile_*`` fixtures are 56x56, 32-channel FireNets with random weights
whose per-layer thresholds (and, for the ANN, a per-layer bias offset) are
tuned so each layer's pixel density hits a target profile on the bundled
frames. ``toy_*`` fixtures are small networks trained by
:mod:`sparseflow.sparsetrain` on synthetic translating patterns.
"""
from __future__ import annotations

import os
from importlib import resources

import numpy as np

from . import evio, netspec, sparsetrain
from .netspec import CONV_FATRELU, LayerSpec, NetworkSpec

# pixel density (%) of the camera input followed by the seven sparsifiable layers
SNN_PROFILE = (9.3, 25.2, 45.3, 30.8, 31.5, 55.4, 56.9, 59.2)
ANN_PROFILE = (8.8, 28.6, 82.5, 37.4, 22.8, 96.2, 98.3, 99.6)

PROFILE_SIZE = 56
PROFILE_FRAMES = 3
FRAME_WINDOW_US = 12500
TOLERANCE_PP = 2.0
TOY_SIZE = 16
TOY_CHANNELS = 8

FILES = (
    "profile_ann.sfnw",
    "profile_ann_events.txt",
    "profile_snn.sfnw",
    "profile_snn_events.txt",
    "toy_ann.sfnw",
    "toy_snn.sfnw",
    "toy_events.txt",
    "toy_gt.sfgt",
)


def data_path(name):
    return str(resources.files("sparseflow").joinpath("data", name))


def scatter_frames(density, n_frames, size, seed):
    """Frames whose active pixels are a uniform random subset covering ``density`` percent."""
    rng = np.random.default_rng(seed)
    n_active = int(round(density / 100 * size * size))
    frames = []
    for _ in range(n_frames):
        counts = np.zeros((size, size, 2), dtype=np.int32)
        pix = rng.choice(size * size, n_active, replace=False)
        pol = rng.integers(0, 2, n_active)
        counts.reshape(-1, 2)[pix, pol] = rng.integers(1, 4, n_active)
        both = rng.random(n_active) < 0.2
        counts.reshape(-1, 2)[pix[both], 1 - pol[both]] = 1
        frames.append(counts)
    return frames


def frames_to_spikes(frames, window=FRAME_WINDOW_US):
    """Spike stream whose window-mode frames reproduce ``frames`` exactly."""
    out = []
    for k, counts in enumerate(frames):
        ys, xs, ps = np.nonzero(counts)
        reps = counts[ys, xs, ps]
        n = int(reps.sum())
        t = k * window + (np.arange(n) * (window - 1)) // max(n, 1)
        out.append(evio.make_spikes(t, np.repeat(xs, reps), np.repeat(ys, reps), np.repeat(ps, reps)))
    return np.concatenate(out) if out else np.zeros(0, dtype=evio.SPIKE_DTYPE)


# ------------------------------------------------------------------ density-profile networks
#
# Each layer gets per-channel thresholds (SNN) or per-channel bias offsets
# (ANN) chosen so that every channel is active at the same rate q; q itself is
# bisected until the layer's pixel density matches the target. Calibration
# runs in float64; the engine later sees the BFloat16-rounded parameters.


def _layer_runner(kind, x_frames, w, rec, bias, thr, leak):
    """Float64 stand-in for one layer over a frame sequence; ``run(param)`` returns outputs.

    ``param`` is the per-channel threshold (SNN) or bias offset subtracted from
    ``bias`` (ANN).
    """
    fwd = [sparsetrain.conv_fwd(x[None], w)[0][0] for x in x_frames]

    def run(param):
        h = np.zeros(fwd[0].shape)
        v = np.zeros_like(h)
        outs = []
        for z in fwd:
            if rec is not None:
                z = z + sparsetrain.conv_fwd(h[None], rec)[0][0]
            if kind == "ann":
                z = z + bias - param
                out = np.where(z > thr, z, 0.0)
            else:
                u = v + z
                out = (u > param).astype(np.float64)
                v = np.where(out > 0, 0.0, leak * u)
            h = out
            outs.append(out)
        return outs

    return run


def _pixel_density(outs):
    return 100.0 * float(np.mean([np.any(o != 0, axis=-1).mean() for o in outs]))


def _channel_rates(outs):
    return np.mean([(o != 0).mean(axis=(0, 1)) for o in outs], axis=0)


def _fit_rates(run, q, lo, hi, fixed=None, iters=30):
    """Per-channel bisection: find ``param`` giving every channel activity rate ``q``.

    Channels listed in ``fixed`` (index -> value) keep their value.
    """
    fixed = fixed or {}
    idx = np.array(sorted(fixed), dtype=np.intp)
    vals = np.array([fixed[i] for i in idx])
    lo = np.full(32, lo)
    hi = np.full(32, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        mid[idx] = vals
        above = _channel_rates(run(mid)) > q
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    out = 0.5 * (lo + hi)
    out[idx] = vals
    return out


def _fit_layer(run, target, lo, hi, fixed=None, iters=20):
    q_lo, q_hi = 0.0, 1.0
    for _ in range(iters):
        q = 0.5 * (q_lo + q_hi)
        if _pixel_density(run(_fit_rates(run, q, lo, hi, fixed))) > target:
            q_hi = q
        else:
            q_lo = q
    return _fit_rates(run, 0.5 * (q_lo + q_hi), lo, hi, fixed)


def _sparsest(run, fits, target):
    """Among fits within tolerance of the pixel target, the one with fewest active neurons."""
    scored = []
    for param in fits:
        outs = run(param)
        miss = abs(_pixel_density(outs) - target)
        scored.append((miss > TOLERANCE_PP, float(np.mean(_channel_rates(outs))) if miss <= TOLERANCE_PP else miss))
    return fits[min(range(len(fits)), key=lambda k: scored[k])]


def profile_network(kind, seed=0, size=PROFILE_SIZE, n_frames=PROFILE_FRAMES):
    """A 56x56 FireNet tuned to the pixel-density profile of ``kind``; returns ``(spec, frames)``."""
    profile = SNN_PROFILE if kind == "snn" else ANN_PROFILE
    frames = scatter_frames(profile[0], n_frames, size, seed + 1)
    base = netspec.firenet(kind, channels=32, seed=seed, threshold=1.0, height=size, width=size)
    xs = [f.astype(np.float64) for f in frames]
    layers = []
    thr = 0.05
    target_of = lambda i: profile[i + 1]
    for i, layer in enumerate(base.layers[:-1]):
        w = layer.kernel.astype(np.float64)
        rec = None if layer.rec_kernel is None else layer.rec_kernel.astype(np.float64)
        if kind == "ann":
            rand_b = layer.bias.astype(np.float64)
            run = _layer_runner(kind, xs, w, rec, rand_b, thr, None)
            # input-free pixels all see the bias alone and switch together; one
            # candidate lets the largest-bias channel alone carry them
            c0 = int(np.argmax(rand_b))
            fits = [_fit_layer(run, target_of(i), -50.0, 50.0),
                    _fit_layer(run, target_of(i), -50.0, 50.0, {c0: rand_b[c0] - 2 * thr})]
            offset = _sparsest(run, fits, target_of(i))
            sl = LayerSpec(CONV_FATRELU, w, rand_b - offset, np.full(32, thr), None, rec)
        else:
            leak = layer.leaks.astype(np.float64)
            run = _layer_runner(kind, xs, w, rec, None, None, leak)
            sl = LayerSpec(layer.kind, w, None, _fit_layer(run, target_of(i), 1e-3, 50.0), leak, rec)
        layers.append(sl)
        # the next layer is calibrated on the exact BFloat16 outputs the engine will produce
        pending = np.zeros(frames[0].shape[:2] + (32,), dtype=np.float32)
        outs = []
        for x in xs:
            out, pending = netspec.reference_layer_step(sl, x, pending)
            outs.append(out)
        xs = [o.astype(np.float64) for o in outs]
    layers.append(base.layers[-1])
    return NetworkSpec(layers, size, size).validate(), frames


# ------------------------------------------------------------------ trained toy networks


def toy_dataset(seed=0):
    return sparsetrain.synthetic_flow_dataset(n_seq=4, n_frames=6, height=TOY_SIZE, width=TOY_SIZE, seed=seed)


def toy_network(kind, seed=0, epochs=40, lambda_s=1e-3):
    data = toy_dataset(seed)
    init = netspec.firenet(kind, channels=TOY_CHANNELS, seed=seed, threshold=0.5, height=TOY_SIZE, width=TOY_SIZE)
    cfg = sparsetrain.TrainConfig(lambda_s=lambda_s, epochs=epochs, seed=seed)
    spec, _ = sparsetrain.train(init, data, cfg)
    return spec


def generate(outdir, seed=0):
    """Write every fixture file into ``outdir``; returns the list of paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for kind in ("ann", "snn"):
        spec, frames = profile_network(kind, seed)
        p = os.path.join(outdir, f"profile_{kind}.sfnw")
        netspec.save_network(spec, p)
        q = os.path.join(outdir, f"profile_{kind}_events.txt")
        evio.write_spikes(q, frames_to_spikes(frames))
        paths += [p, q]
        p = os.path.join(outdir, f"toy_{kind}.sfnw")
        netspec.save_network(toy_network(kind, seed), p)
        paths.append(p)
    data = toy_dataset(seed + 100)
    frames = [data.frames[0, t].astype(np.int32) for t in range(data.frames.shape[1])]
    p = os.path.join(outdir, "toy_events.txt")
    evio.write_spikes(p, frames_to_spikes(frames))
    q = os.path.join(outdir, "toy_gt.sfgt")
    gt = evio.FlowGroundTruth(data.targets[0, 0].astype(np.float32), np.ones((TOY_SIZE, TOY_SIZE), dtype=bool))
    evio.save_flow_gt(q, gt)
    return paths + [p, q]
