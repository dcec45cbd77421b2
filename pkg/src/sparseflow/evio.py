"""Event-camera input: spike files, event frames, spatial sorting, cropping, flow ground truth."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SPIKE_DTYPE = np.dtype([("t", np.int64), ("x", np.uint16), ("y", np.uint16), ("p", np.uint8)])
GT_MAGIC = b"SFGT"


class EventFileError(ValueError):
    pass


@dataclass
class EventFrame:
    counts: np.ndarray  # (H, W, 2) per-pixel, per-polarity counts
    t_start: int
    t_end: int

    @property
    def n_spikes(self):
        return int(self.counts.sum())


@dataclass
class FlowGroundTruth:
    flow: np.ndarray  # (H, W, 2) float32, pixels per frame
    valid_mask: np.ndarray  # (H, W) bool


def make_spikes(t, x, y, p):
    out = np.zeros(len(t), dtype=SPIKE_DTYPE)
    out["t"], out["x"], out["y"], out["p"] = t, x, y, p
    return out


def read_spikes(path, width=None, height=None):
    """Parse a text spike file with one ``t_us x y p`` record per line."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise EventFileError(f"{path}:{lineno}: expected 't x y p', got {line!r}")
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise EventFileError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            if p not in (0, 1) or x < 0 or y < 0:
                raise EventFileError(f"{path}:{lineno}: bad coordinates or polarity in {line!r}")
            if (width is not None and x >= width) or (height is not None and y >= height):
                raise EventFileError(f"{path}:{lineno}: pixel ({x}, {y}) outside {width}x{height}")
            rows.append((t, x, y, p))
    return np.array(rows, dtype=SPIKE_DTYPE) if rows else np.zeros(0, dtype=SPIKE_DTYPE)


def write_spikes(path, spikes):
    with open(path, "w", encoding="utf-8") as fh:
        for s in spikes:
            fh.write(f"{s['t']} {s['x']} {s['y']} {s['p']}\n")


def sort_spatial(spikes):
    """Row-major order (y, then x); same-pixel spikes keep their arrival order."""
    spikes = np.asarray(spikes, dtype=SPIKE_DTYPE)
    return spikes[np.lexsort((spikes["x"], spikes["y"]))]


def accumulate(spikes, height, width):
    counts = np.zeros((height, width, 2), dtype=np.int32)
    if len(spikes):
        if spikes["x"].max() >= width or spikes["y"].max() >= height:
            raise EventFileError(f"spike outside the {width}x{height} sensor")
        np.add.at(counts, (spikes["y"].astype(np.intp), spikes["x"].astype(np.intp), spikes["p"].astype(np.intp)), 1)
    return counts


def build_frames(spikes, height, width, count=None, window=None, origin=None):
    """Split a time-sorted stream into consecutive, non-overlapping event frames.

    Exactly one of ``count`` (spikes per frame) or ``window`` (microseconds)
    must be given. In count mode a shorter final frame holds the remainder.
    In window mode frame ``k`` covers ``[origin + k*window, origin + (k+1)*window)``
    with ``origin`` defaulting to the window grid line at or before the first
    spike (so frames sit on multiples of ``window``); empty windows in the
    middle of the stream still produce (empty) frames.
    """
    spikes = np.asarray(spikes, dtype=SPIKE_DTYPE)
    if (count is None) == (window is None):
        raise ValueError("give exactly one of count or window")
    if np.any(np.diff(spikes["t"]) < 0):
        raise EventFileError("spike stream is not sorted by time")
    if len(spikes) == 0:
        return []
    frames = []
    if count is not None:
        if count <= 0:
            raise ValueError("count must be positive")
        for i in range(0, len(spikes), count):
            chunk = spikes[i : i + count]
            frames.append(EventFrame(accumulate(chunk, height, width), int(chunk["t"][0]), int(chunk["t"][-1])))
        return frames
    if window <= 0:
        raise ValueError("window must be positive")
    t0 = (int(spikes["t"][0]) // window) * window if origin is None else origin
    if spikes["t"][0] < t0:
        raise ValueError("origin lies after the first spike")
    k = (spikes["t"] - t0) // window
    bounds = np.searchsorted(k, np.arange(int(k[-1]) + 2))
    for j in range(int(k[-1]) + 1):
        chunk = spikes[bounds[j] : bounds[j + 1]]
        start = int(t0 + j * window)
        frames.append(EventFrame(accumulate(chunk, height, width), start, int(start + window)))
    return frames


def central_crop(a, crop_h, crop_w):
    h, w = a.shape[:2]
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} larger than {h}x{w}")
    y0, x0 = (h - crop_h) // 2, (w - crop_w) // 2
    return a[y0 : y0 + crop_h, x0 : x0 + crop_w]


def downsample(frame: EventFrame, factor, crop=None):
    """Central crop (default: the whole frame) followed by ``factor x factor`` count summation."""
    counts = frame.counts
    crop_h, crop_w = crop if crop is not None else counts.shape[:2]
    if factor < 1 or crop_h % factor or crop_w % factor:
        raise ValueError(f"factor {factor} does not divide the {crop_h}x{crop_w} crop")
    c = central_crop(counts, crop_h, crop_w)
    out = c.reshape(crop_h // factor, factor, crop_w // factor, factor, c.shape[2]).sum(axis=(1, 3))
    return EventFrame(out.astype(counts.dtype), frame.t_start, frame.t_end)


def save_flow_gt(path, gt: FlowGroundTruth):
    h, w = gt.valid_mask.shape
    with open(path, "wb") as fh:
        fh.write(GT_MAGIC + struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(gt.flow, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(gt.valid_mask, dtype=np.uint8).tobytes())


def load_flow_gt(path) -> FlowGroundTruth:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != GT_MAGIC:
        raise EventFileError(f"{path}: not a flow ground-truth file")
    if len(data) < 12:
        raise EventFileError(f"{path}: truncated header")
    h, w = struct.unpack_from("<II", data, 4)
    n_flow = h * w * 2 * 4
    if len(data) != 12 + n_flow + h * w:
        raise EventFileError(f"{path}: expected {12 + n_flow + h * w} bytes, found {len(data)}")
    flow = np.frombuffer(data, dtype="<f4", count=h * w * 2, offset=12).reshape(h, w, 2).astype(np.float32)
    mask = np.frombuffer(data, dtype=np.uint8, offset=12 + n_flow).reshape(h, w) != 0
    return FlowGroundTruth(flow, mask)
