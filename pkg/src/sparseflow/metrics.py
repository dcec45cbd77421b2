"""Activation density, flow accuracy and image outputs."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

OUTLIER_PX = 3.0
NO_VALID_PIXELS = "no valid pixels"


def neuron_density(t) -> float:
    t = np.asarray(t)
    return float(np.count_nonzero(t)) / t.size if t.size else 0.0


def pixel_density(t) -> float:
    t = np.asarray(t)
    if t.size == 0:
        return 0.0
    return float(np.count_nonzero(np.any(t != 0, axis=-1))) / (t.shape[0] * t.shape[1])


def channels_per_pixel(t):
    return np.count_nonzero(np.asarray(t), axis=-1)


@dataclass
class FlowError:
    aee: float | None
    outlier_pct: float | None
    n_pixels: int
    flag: str = ""

    @property
    def valid(self):
        return self.n_pixels > 0


def aee(pred, gt_flow, valid_mask, event_mask=None, outlier_px=OUTLIER_PX) -> FlowError:
    """Average endpoint error and share of pixels whose error exceeds ``outlier_px``.

    Evaluated where the ground truth is valid and (if given) the input frame
    had at least one event.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    if pred.shape != gt_flow.shape or pred.shape[-1] != 2:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt_flow.shape} differ")
    mask = np.asarray(valid_mask, dtype=bool)
    if event_mask is not None:
        mask = mask & np.asarray(event_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return FlowError(None, None, 0, NO_VALID_PIXELS)
    err = np.linalg.norm(pred[mask] - gt_flow[mask], axis=-1)
    return FlowError(float(err.mean()), 100.0 * float(np.mean(err > outlier_px)), n)


def mean_flow_error(errors):
    """Unweighted mean over frames that had valid pixels; ``(aee, outlier_pct, n_frames)``."""
    ok = [e for e in errors if e.valid]
    if not ok:
        return None, None, 0
    return float(np.mean([e.aee for e in ok])), float(np.mean([e.outlier_pct for e in ok])), len(ok)


@dataclass
class DensityReport:
    neuron: list = field(default_factory=list)  # [frame][layer]
    pixel: list = field(default_factory=list)
    sparse_layers: tuple = ()  # layer indices included in network averages

    def layer_means(self):
        return np.mean(self.neuron, axis=0), np.mean(self.pixel, axis=0)

    @property
    def mean_neuron_density(self):
        return float(np.mean(np.asarray(self.neuron)[:, list(self.sparse_layers)]))

    @property
    def mean_pixel_density(self):
        return float(np.mean(np.asarray(self.pixel)[:, list(self.sparse_layers)]))


def density_report(layer_outputs, n_sparse=None):
    """Densities for ``layer_outputs[frame][layer]``, where layer 0 is the camera input
    and the last entry is the dense flow head; only the layers in between enter the averages."""
    rep = DensityReport()
    for layers in layer_outputs:
        rep.neuron.append([neuron_density(t) for t in layers])
        rep.pixel.append([pixel_density(t) for t in layers])
    n_layers = len(layer_outputs[0]) if layer_outputs else 0
    stop = n_layers - 1 if n_sparse is None else 1 + n_sparse
    rep.sparse_layers = tuple(range(1, stop))
    return rep


def write_density_csv(path, rep: DensityReport, header_lines=()):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("frame,layer,neuron_density,pixel_density\n")
        for f, (nd, pd) in enumerate(zip(rep.neuron, rep.pixel)):
            for l, (a, b) in enumerate(zip(nd, pd)):
                fh.write(f"{f},{l},{a!r},{b!r}\n")
        if rep.neuron:
            fh.write(f"mean,sparse,{rep.mean_neuron_density!r},{rep.mean_pixel_density!r}\n")


def write_ppm(path, rgb, comment=None):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[:, :, None], 3, axis=2)
    head = b"P6\n"
    if comment:
        head += b"# " + comment.encode() + b"\n"
    head += f"{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(head + rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, i = [], 0
    while len(tokens) < 4:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            i = data.index(b"\n", i) + 1
            continue
        j = i
        while not data[j : j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if tokens[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=np.uint8, offset=i + 1, count=w * h * 3).reshape(h, w, 3)


def density_map(t, saturate=8):
    """Gray level per pixel: number of active channels, white at ``saturate`` or more."""
    n = np.minimum(channels_per_pixel(t), saturate)
    return ((n * 255) // saturate).astype(np.uint8)


def density_map_image(t, path, comment=None):
    write_ppm(path, density_map(t), comment)


def flow_to_rgb(flow, max_speed=None):
    """Hue from direction, brightness from speed (normalised by ``max_speed`` or the frame maximum)."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    speed = np.hypot(u, v)
    top = max_speed if max_speed else (speed.max() if speed.size and speed.max() > 0 else 1.0)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    val = np.clip(speed / top, 0, 1)
    to_rgb = np.vectorize(colorsys.hsv_to_rgb)
    r, g, b = to_rgb(hue, 1.0, val)
    return np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def flow_image(flow, path, comment=None, max_speed=None):
    write_ppm(path, flow_to_rgb(flow, max_speed), comment)
