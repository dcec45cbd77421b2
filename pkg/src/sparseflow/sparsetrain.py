"""Toy-scale sparsity-aware training of FireNet-shaped networks.

Float64 numpy with hand-written backpropagation. The forward pass uses the
exact threshold step; the backward pass swaps its derivative for an arctan
surrogate ``sigma'(d) = 1 / (pi * w * (1 + (pi * d / w)^2))``. For gradient
checks the step itself can be replaced by the surrogate's antiderivative
``S(d) = 1/2 + arctan(pi * d / w) / pi^2`` (``relaxed=True``), which makes the
analytic gradient exact.

The flow objective is a supervised L2 proxy on synthetic translating patterns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netspec import CONV_FATRELU, CONV_LIF, FLOW_HEAD, LayerSpec, NetworkSpec

T_MIN = 1e-6
LEAK_MIN, LEAK_MAX = 0.01, 0.99


class DivergenceError(RuntimeError):
    pass


# ------------------------------------------------------------------ surrogate pieces


def surrogate_grad(d, width=1.0):
    return 1.0 / (math.pi * width * (1.0 + (math.pi * np.asarray(d, dtype=np.float64) / width) ** 2))


def relaxed_step(d, width=1.0):
    return 0.5 + np.arctan(math.pi * np.asarray(d, dtype=np.float64) / width) / math.pi**2


def step(d, relaxed=False, width=1.0):
    if relaxed:
        return relaxed_step(d, width)
    return (np.asarray(d) > 0).astype(np.float64)


def fatrelu_surrogate_backward(x, threshold, upstream, width=1.0):
    """Gradients of ``x * BS_T(x)`` with the surrogate in place of the step derivative.

    Returns ``(dL/dx, dL/dT)``.
    """
    x = np.asarray(x, dtype=np.float64)
    threshold = np.asarray(threshold, dtype=np.float64)
    if np.any(threshold <= 0):
        raise ValueError("threshold must be positive")
    sg = surrogate_grad(x - threshold, width)
    s = (x > threshold).astype(np.float64)
    return upstream * (s + x * sg), upstream * (-x * sg)


def sparsification_loss(membranes, thresholds, lambda_i):
    """``sum_i lambda_i * (sum ReLU(x_i) + sum_j (1 / T_ij)^2)``."""
    total = 0.0
    for x, t, lam in zip(membranes, thresholds, lambda_i):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t == 0):
            raise ZeroDivisionError("zero threshold in the sparsification loss")
        total += lam * (np.maximum(np.asarray(x, dtype=np.float64), 0).sum() + np.sum((1.0 / t) ** 2))
    return float(total)


def init_thresholds_from_activations(logged, fallback=T_MIN):
    """Per-channel median of logged activation samples; empty channels get ``fallback``.

    ``logged`` is a list (layers) of lists (channels) of sample arrays.
    """
    out = []
    for layer in logged:
        out.append(np.array([float(np.median(s)) if len(s) else fallback for s in layer]))
    return out


def one_cycle_lr(epoch, epochs, max_lr, pct_start=0.3, div_factor=25.0, final_div=1e4):
    """Linear warm-up to ``max_lr`` then cosine decay to ``max_lr / (div_factor * final_div)``."""
    lo, end = max_lr / div_factor, max_lr / (div_factor * final_div)
    up = max(1, int(round(pct_start * epochs)))
    if epoch < up:
        return lo + (max_lr - lo) * epoch / up
    frac = (epoch - up) / max(1, epochs - 1 - up)
    return end + (max_lr - end) * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))


# ------------------------------------------------------------------ convolution


def im2col(x, k):
    """``(B, H, W, C) -> (B, H, W, k*k*C)`` patches with same-zero padding."""
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    b, h, w, c = x.shape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, h, w, k * k * c)


def col2im(g, k, c):
    """Adjoint of :func:`im2col`."""
    b, h, w, _ = g.shape
    r = k // 2
    g = g.reshape(b, h, w, k, k, c)
    out = np.zeros((b, h + 2 * r, w + 2 * r, c))
    for ky in range(k):
        for kx in range(k):
            out[:, ky : ky + h, kx : kx + w] += g[:, :, :, ky, kx]
    return out[:, r : r + h, r : r + w]


def conv_fwd(x, weight):
    k = weight.shape[0]
    cols = im2col(x, k)
    return cols @ weight.reshape(-1, weight.shape[3]), cols


def conv_bwd(g, cols, weight):
    k, _, cin, cout = weight.shape
    gw = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2])).reshape(weight.shape)
    gx = col2im(g @ weight.reshape(-1, cout).T, k, cin)
    return gw, gx


# ------------------------------------------------------------------ model


@dataclass
class ToyNet:
    """Float64 parameters of a FireNet-shaped network (conv layers + 1x1 flow head)."""

    kind: str
    layers: list  # dicts with W, b (ANN), R (recurrent), T, lam (SNN)
    head: dict

    @classmethod
    def from_spec(cls, spec: NetworkSpec):
        spec.validate()
        layers = []
        for l in spec.layers[:-1]:
            d = {"W": l.kernel.astype(np.float64), "T": l.thresholds.astype(np.float64)}
            if l.kind == CONV_FATRELU:
                d["b"] = l.bias.astype(np.float64)
            else:
                d["lam"] = l.leaks.astype(np.float64)
            if l.recurrent:
                d["R"] = l.rec_kernel.astype(np.float64)
            layers.append(d)
        h = spec.layers[-1]
        head = {"W": h.kernel.astype(np.float64),
                "b": (h.bias if h.bias is not None else np.zeros(2)).astype(np.float64)}
        return cls(spec.kind, layers, head)

    def to_spec(self, height=0, width=0) -> NetworkSpec:
        out = []
        for d in self.layers:
            if self.kind == "ann":
                out.append(LayerSpec(CONV_FATRELU, d["W"], d["b"], d["T"], None, d.get("R")))
            else:
                out.append(LayerSpec(CONV_LIF, d["W"], None, d["T"], d["lam"], d.get("R")))
        out.append(LayerSpec(FLOW_HEAD, self.head["W"], self.head["b"]))
        return NetworkSpec(out, height, width).validate()

    def named_params(self):
        for i, d in enumerate(self.layers):
            for k in ("W", "b", "R", "T", "lam"):
                if k in d:
                    yield f"{k}{i}", d, k
        yield "Whead", self.head, "W"
        yield "bhead", self.head, "b"

    def copy(self):
        return ToyNet(self.kind, [{k: v.copy() for k, v in d.items()} for d in self.layers],
                      {k: v.copy() for k, v in self.head.items()})

    def project(self):
        for d in self.layers:
            np.maximum(d["T"], T_MIN, out=d["T"])
            if "lam" in d:
                np.clip(d["lam"], LEAK_MIN, LEAK_MAX, out=d["lam"])

    def zero_state(self, b, h, w):
        state = []
        for d in self.layers:
            c = d["W"].shape[3]
            state.append({"h": np.zeros((b, h, w, c)), "v": np.zeros((b, h, w, c))})
        return state


def _forward_frame(net: ToyNet, x, state, relaxed, width):
    """One frame. Returns ``(flow, tape, new_state, outputs)``."""
    tape = []
    new_state = []
    outputs = []
    for d, st in zip(net.layers, state):
        z, cols = conv_fwd(x, d["W"])
        rec_cols = None
        if "R" in d:
            zr, rec_cols = conv_fwd(st["h"], d["R"])
            z = z + zr
        ent = {"cols": cols, "rec_cols": rec_cols, "cin": x.shape[3]}
        if net.kind == "ann":
            z = z + d["b"]
            s = step(z - d["T"], relaxed, width)
            out = z * s
            ent.update(z=z, s=s)
            new_state.append({"h": out, "v": st["v"]})
        else:
            u = st["v"] + z
            s = step(u - d["T"], relaxed, width)
            out = s
            ent.update(u=u, s=s)
            new_state.append({"h": out, "v": d["lam"] * (1 - s) * u})
        tape.append(ent)
        outputs.append(out)
        x = out
    zh, cols = conv_fwd(x, net.head["W"])
    zh = zh + net.head["b"]
    y = zh / (1 + np.abs(zh))
    tape.append({"cols": cols, "z": zh, "cin": x.shape[3]})
    return y, tape, new_state, outputs


def _zero_grads(net):
    return {name: np.zeros_like(d[k]) for name, d, k in net.named_params()}


def _backward_frame(net, tape, gy, g_next, grads, ls_scale, lam_i, width):
    """Backpropagate one frame; ``g_next`` holds gradients w.r.t. this frame's outgoing state.

    Returns gradients w.r.t. the incoming state.
    """
    head = tape[-1]
    gz = gy / (1 + np.abs(head["z"])) ** 2
    gw, gx = conv_bwd(gz, head["cols"], net.head["W"])
    grads["Whead"] += gw
    grads["bhead"] += gz.sum(axis=(0, 1, 2))
    g_prev = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        d, ent, gn = net.layers[i], tape[i], g_next[i]
        g_out = gx + gn["h"]
        if net.kind == "ann":
            z, s = ent["z"], ent["s"]
            sg = surrogate_grad(z - d["T"], width)
            gz = g_out * (s + z * sg) + ls_scale * lam_i[i] * (z > 0)
            grads[f"T{i}"] += np.sum(-g_out * z * sg, axis=(0, 1, 2))
            grads[f"b{i}"] += gz.sum(axis=(0, 1, 2))
            gv_prev = gn["v"]  # ANN carries no membrane
        else:
            u, s, lam = ent["u"], ent["s"], d["lam"]
            sg = surrogate_grad(u - d["T"], width)
            gvn = gn["v"]
            gz = g_out * sg + gvn * (lam * (1 - s) - lam * u * sg) + ls_scale * lam_i[i] * (u > 0)
            grads[f"T{i}"] += np.sum(-g_out * sg + gvn * lam * u * sg, axis=(0, 1, 2))
            grads[f"lam{i}"] += np.sum(gvn * (1 - s) * u, axis=(0, 1, 2))
            gv_prev = gz
        gw, gx = conv_bwd(gz, ent["cols"], d["W"])
        grads[f"W{i}"] += gw
        gh_prev = np.zeros_like(gz)
        if "R" in d:
            gr, gh_prev = conv_bwd(gz, ent["rec_cols"], d["R"])
            grads[f"R{i}"] += gr
        g_prev[i] = {"h": gh_prev, "v": gv_prev}
    return g_prev


# ------------------------------------------------------------------ loss and gradient


@dataclass
class TrainConfig:
    lambda_s: float = 0.0
    lambda_i: tuple | None = None  # per sparsifiable layer; default all 1
    max_lr: float = 0.05
    epochs: int = 60
    surrogate_width: float = 1.0
    seed: int = 0
    bptt: int = 5
    clip_norm: float = 1.0
    threshold_init: str = "median"  # or "keep"

    def __post_init__(self):
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be non-negative")
        if self.lambda_i is not None and any(l <= 0 for l in self.lambda_i):
            raise ValueError("lambda_i must be positive")


@dataclass
class LossParts:
    loss: float
    proxy: float
    ls: float
    neuron_density: float
    pixel_density: float


def loss_and_grad(net: ToyNet, frames, targets, lambda_s, lambda_i=None, relaxed=False, width=1.0,
                  bptt=None, need_grad=True):
    """Loss ``proxy + lambda_s * L_s`` over a batch of sequences and its gradient.

    ``frames`` and ``targets`` are ``(B, F, H, W, 2)``. ``L_s`` is evaluated per
    (sequence, frame) and averaged; backpropagation through time is truncated
    to windows of ``bptt`` frames (``None`` = full sequence).
    """
    frames = np.asarray(frames, dtype=np.float64)
    b, n_frames, h, w, _ = frames.shape
    lam_i = np.ones(len(net.layers)) if lambda_i is None else np.asarray(lambda_i, dtype=np.float64)
    norm = 1.0 / (b * n_frames)
    ls_scale = lambda_s * norm
    grads = _zero_grads(net) if need_grad else None
    state = net.zero_state(b, h, w)
    proxy = relu_sum = 0.0
    act = pix = 0.0
    window = n_frames if not bptt else bptt
    for t0 in range(0, n_frames, window):
        tapes = []
        for t in range(t0, min(t0 + window, n_frames)):
            y, tape, state, outs = _forward_frame(net, frames[:, t], state, relaxed, width)
            diff = y - targets[:, t]
            proxy += np.sum(diff**2) * norm
            for i, ent in enumerate(tape[:-1]):
                m = ent["z"] if net.kind == "ann" else ent["u"]
                relu_sum += lam_i[i] * np.maximum(m, 0).sum() * norm
            for o in outs:
                act += np.count_nonzero(o) / o.size
                pix += np.count_nonzero(np.any(o != 0, axis=-1)) / (o.size // o.shape[-1])
            tapes.append((tape, 2 * diff * norm))
        if need_grad:
            g_next = [{"h": np.zeros_like(s["h"]), "v": np.zeros_like(s["v"])} for s in state]
            for tape, gy in reversed(tapes):
                g_next = _backward_frame(net, tape, gy, g_next, grads, ls_scale, lam_i, width)
    t_term = sum(lam_i[i] * np.sum(1.0 / d["T"] ** 2) for i, d in enumerate(net.layers))
    ls = relu_sum + t_term
    if need_grad:
        for i, d in enumerate(net.layers):
            grads[f"T{i}"] += lambda_s * lam_i[i] * (-2.0 / d["T"] ** 3)
    n_out = n_frames * len(net.layers)
    parts = LossParts(proxy + lambda_s * ls, proxy, ls, act / n_out, pix / n_out)
    return parts, grads


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)  # parameter class -> worst relative error

    @property
    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def grad_check(net: ToyNet, frames, targets, lambda_s=1e-3, lambda_i=None, width=1.0, eps=1e-6,
               max_entries=12, seed=0):
    """Compare analytic gradients of the relaxed loss with central differences.

    Up to ``max_entries`` random entries per parameter are probed. The error of
    an entry is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grad(net, frames, targets, lambda_s, lambda_i, relaxed=True, width=width)
    report = GradCheckReport()
    for name, d, k in net.named_params():
        arr = d[k]
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, min(max_entries, flat.size), replace=False)
        worst = 0.0
        for j in idx:
            old = flat[j]
            h = eps * max(1.0, abs(old))
            flat[j] = old + h
            lp = loss_and_grad(net, frames, targets, lambda_s, lambda_i, relaxed=True, width=width, need_grad=False)[0].loss
            flat[j] = old - h
            lm = loss_and_grad(net, frames, targets, lambda_s, lambda_i, relaxed=True, width=width, need_grad=False)[0].loss
            flat[j] = old
            num = (lp - lm) / (2 * h)
            ana = grads[name].reshape(-1)[j]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
        cls = name.rstrip("0123456789")
        report.max_rel_error[cls] = max(report.max_rel_error.get(cls, 0.0), worst)
    return report


# ------------------------------------------------------------------ data


@dataclass
class FlowDataset:
    frames: np.ndarray  # (B, F, H, W, 2) event counts
    targets: np.ndarray  # (B, F, H, W, 2) flow in pixels per frame
    velocities: np.ndarray  # (B, 2)


def synthetic_flow_dataset(n_seq=4, n_frames=6, height=16, width=16, seed=0, contrast=0.15, max_speed=0.8,
                           n_waves=4):
    """Periodic random patterns translating at a constant velocity per sequence.

    Events are counted from the per-pixel intensity change between consecutive
    frames, in steps of ``contrast``; polarity 0 = brighter, 1 = darker.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    frames = np.zeros((n_seq, n_frames, height, width, 2))
    targets = np.zeros((n_seq, n_frames, height, width, 2))
    vel = rng.uniform(-max_speed, max_speed, (n_seq, 2))
    for s in range(n_seq):
        ky = rng.integers(1, 3, n_waves) * rng.choice([-1, 1], n_waves)
        kx = rng.integers(1, 3, n_waves) * rng.choice([-1, 1], n_waves)
        ph = rng.uniform(0, 2 * np.pi, n_waves)
        amp = rng.uniform(0.5, 1.0, n_waves)

        def image(t):
            u, v = vel[s] * t
            return sum(a * np.sin(2 * np.pi * (kx_ * (xs - u) / width + ky_ * (ys - v) / height) + p)
                       for a, kx_, ky_, p in zip(amp, kx, ky, ph))

        prev = image(0)
        for t in range(n_frames):
            cur = image(t + 1)
            delta = cur - prev
            frames[s, t, :, :, 0] = np.floor(np.maximum(delta, 0) / contrast)
            frames[s, t, :, :, 1] = np.floor(np.maximum(-delta, 0) / contrast)
            targets[s, t] = vel[s]
            prev = cur
    return FlowDataset(frames, targets, vel)


# ------------------------------------------------------------------ training


def calibrate_thresholds(net: ToyNet, frames):
    """Set every threshold to the median of its channel's positive pre-activations."""
    frames = np.asarray(frames, dtype=np.float64)
    b, n_frames, h, w, _ = frames.shape
    probe = net.copy()
    if probe.kind == "ann":
        for d in probe.layers:
            d["T"][:] = T_MIN
    logged = [[[] for _ in range(d["W"].shape[3])] for d in probe.layers]
    state = probe.zero_state(b, h, w)
    for t in range(n_frames):
        _, tape, state, _ = _forward_frame(probe, frames[:, t], state, False, 1.0)
        for i, ent in enumerate(tape[:-1]):
            m = ent["z"] if probe.kind == "ann" else ent["u"]
            for c in range(m.shape[-1]):
                v = m[..., c]
                logged[i][c].append(v[v > 0])
    flat = [[np.concatenate(ch) for ch in layer] for layer in logged]
    for d, t in zip(net.layers, init_thresholds_from_activations(flat)):
        d["T"][:] = np.maximum(t, T_MIN)
    return net


def train(spec: NetworkSpec, data: FlowDataset, cfg: TrainConfig, log=None):
    """Full-batch gradient descent on ``proxy + lambda_s * L_s``.

    Returns ``(trained spec, history)`` where ``history`` holds one
    :class:`LossParts` per epoch (measured before that epoch's update) plus a
    final entry after the last update.
    """
    net = ToyNet.from_spec(spec)
    if cfg.threshold_init == "median":
        calibrate_thresholds(net, data.frames)
    elif cfg.threshold_init != "keep":
        raise ValueError(f"unknown threshold_init {cfg.threshold_init!r}")
    lam_i = cfg.lambda_i
    history = []
    for epoch in range(cfg.epochs):
        parts, grads = loss_and_grad(net, data.frames, data.targets, cfg.lambda_s, lam_i,
                                     width=cfg.surrogate_width, bptt=cfg.bptt)
        if not np.isfinite(parts.loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"epoch {epoch}: loss became {parts.loss}")
        history.append(parts)
        if log is not None:
            log(epoch, parts)
        gnorm = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
        scale = min(1.0, cfg.clip_norm / gnorm) if gnorm > 0 else 1.0
        lr = one_cycle_lr(epoch, cfg.epochs, cfg.max_lr)
        for name, d, k in net.named_params():
            d[k] -= lr * scale * grads[name]
        net.project()
    final, _ = loss_and_grad(net, data.frames, data.targets, cfg.lambda_s, lam_i, width=cfg.surrogate_width,
                             need_grad=False)
    history.append(final)
    if log is not None:
        log(cfg.epochs, final)
    h, w = data.frames.shape[2:4]
    return net.to_spec(h, w), history


def write_log_header(fh, header_lines=()):
    for line in header_lines:
        fh.write(f"# {line}\n")
    fh.write("epoch,loss,proxy,ls,mean_neuron_density,mean_pixel_density\n")


def log_row(epoch, p: LossParts):
    return f"{epoch},{p.loss!r},{p.proxy!r},{p.ls!r},{p.neuron_density!r},{p.pixel_density!r}\n"
