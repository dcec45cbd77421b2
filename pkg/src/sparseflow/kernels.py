"""Hot inner loops of the depth-first engine, in numba and numpy flavours.

``integrate`` and ``fire`` dispatch on :data:`sparseflow._accel.USE_NUMBA`.
The ``*_nb`` and ``*_np`` variants are public so tests and the benchmark can
compare them directly; they must agree bit for bit.

State arrays have shape ``(R, W, C)``; image row ``y`` lives in slot ``y % R``.
"""
import numpy as np

from . import _accel
from ._accel import njit
from .tensorcore import SOFTSIGN_MAX, bf16_round

MODE_FATRELU = 0
MODE_LIF = 1
MODE_SOFTSIGN = 2


@njit
def _round_inplace(u):
    # u is a uint32 view of a float32 buffer
    for i in range(u.shape[0]):
        b = np.int64(u[i])
        if (b & 0x7FFFFFFF) > 0x7F800000:
            u[i] = 0x7FC00000
        else:
            u[i] = ((b + 0x7FFF + ((b >> 16) & 1)) >> 16) << 16


@njit
def integrate_nb(state, iy, ix, chans, vals, weights, height, width, tmp, tmp_u):
    k = weights.shape[0]
    r = k // 2
    rr = state.shape[0]
    c_out = state.shape[2]
    n = chans.shape[0]
    for oy in range(max(iy - r, 0), min(iy + r, height - 1) + 1):
        ky = iy - oy + r
        slot = oy % rr
        for ox in range(max(ix - r, 0), min(ix + r, width - 1) + 1):
            kx = ix - ox + r
            for e in range(n):
                v = vals[e]
                if v == 0:
                    continue
                c = chans[e]
                for co in range(c_out):
                    tmp[co] = v * weights[ky, kx, c, co]
                _round_inplace(tmp_u)
                for co in range(c_out):
                    tmp[co] = state[slot, ox, co] + tmp[co]
                _round_inplace(tmp_u)
                for co in range(c_out):
                    state[slot, ox, co] = tmp[co]


def integrate_np(state, iy, ix, chans, vals, weights, height, width):
    k = weights.shape[0]
    r = k // 2
    rows = np.arange(max(iy - r, 0), min(iy + r, height - 1) + 1)
    cols = np.arange(max(ix - r, 0), min(ix + r, width - 1) + 1)
    slots = rows % state.shape[0]
    w_blk = weights[np.ix_(iy - rows + r, ix - cols + r)]  # (nr, nc, Cin, Cout)
    blk = state[np.ix_(slots, cols)]
    for c, v in zip(chans, vals):
        if v == 0:
            continue
        prod = bf16_round(np.float32(v) * w_blk[:, :, c, :])
        blk = bf16_round(blk + prod)
    state[np.ix_(slots, cols)] = blk


@njit
def fire_nb(state, p0, p1, width, mode, bias, has_bias, thresholds, leaks, out, tmp, tmp_u):
    rr = state.shape[0]
    c_out = state.shape[2]
    one = np.float32(1.0)
    zero = np.float32(0.0)
    smax = np.float32(SOFTSIGN_MAX)
    for p in range(p0, p1):
        y = p // width
        x = p - y * width
        slot = y % rr
        for c in range(c_out):
            tmp[c] = state[slot, x, c]
        if has_bias:
            for c in range(c_out):
                tmp[c] = tmp[c] + bias[c]
            _round_inplace(tmp_u)
        row = p - p0
        if mode == 0:
            for c in range(c_out):
                out[row, c] = tmp[c] if tmp[c] > thresholds[c] else zero
                state[slot, x, c] = zero
        elif mode == 1:
            for c in range(c_out):
                if tmp[c] > thresholds[c]:
                    out[row, c] = one
                    tmp[c] = zero
                else:
                    out[row, c] = zero
                    tmp[c] = leaks[c] * tmp[c]
            _round_inplace(tmp_u)
            for c in range(c_out):
                state[slot, x, c] = tmp[c]
        else:
            for c in range(c_out):
                tmp[c] = tmp[c] / (one + abs(tmp[c]))
                state[slot, x, c] = zero
            _round_inplace(tmp_u)
            for c in range(c_out):
                out[row, c] = min(max(tmp[c], -smax), smax)


def fire_np(state, p0, p1, width, mode, bias, has_bias, thresholds, leaks):
    # rows R apart share a ring slot: the earlier one must be reset before the later one is read
    span = state.shape[0] * width
    if p1 - p0 > span:
        return np.concatenate([
            fire_np(state, q, min(q + span, p1), width, mode, bias, has_bias, thresholds, leaks)
            for q in range(p0, p1, span)
        ])
    pix = np.arange(p0, p1)
    ys, xs = pix // width, pix % width
    slots = ys % state.shape[0]
    u = state[slots, xs]
    if has_bias:
        u = bf16_round(u + bias)
    if mode == MODE_FATRELU:
        out = np.where(u > thresholds, u, np.float32(0)).astype(np.float32)
        state[slots, xs] = 0
    elif mode == MODE_LIF:
        spk = u > thresholds
        out = spk.astype(np.float32)
        state[slots, xs] = np.where(spk, np.float32(0), bf16_round(leaks * u))
    else:
        out = np.clip(bf16_round(u / (np.float32(1) + np.abs(u))), -SOFTSIGN_MAX, SOFTSIGN_MAX)
        state[slots, xs] = 0
    return out


class Scratch:
    """Per-core float32 scratch vector plus its uint32 alias for in-place rounding."""

    def __init__(self, channels):
        self.tmp = np.zeros(channels, dtype=np.float32)
        self.tmp_u = self.tmp.view(np.uint32)


def integrate(state, iy, ix, chans, vals, weights, height, width, scratch, use_numba=None):
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    if use_numba:
        integrate_nb(
            state,
            iy,
            ix,
            np.ascontiguousarray(chans, dtype=np.int64),
            np.ascontiguousarray(vals, dtype=np.float32),
            weights,
            height,
            width,
            scratch.tmp,
            scratch.tmp_u,
        )
    else:
        integrate_np(state, iy, ix, chans, vals, weights, height, width)


def fire(state, p0, p1, width, mode, bias, thresholds, leaks, scratch, use_numba=None):
    """Activate pixels ``p0 .. p1-1`` (row-major indices); returns ``(p1-p0, C)`` outputs."""
    if use_numba is None:
        use_numba = _accel.USE_NUMBA
    c_out = state.shape[2]
    has_bias = bias is not None
    bias = bias if has_bias else np.zeros(c_out, dtype=np.float32)
    thresholds = thresholds if thresholds is not None else np.zeros(c_out, dtype=np.float32)
    leaks = leaks if leaks is not None else np.zeros(c_out, dtype=np.float32)
    if use_numba:
        out = np.zeros((p1 - p0, c_out), dtype=np.float32)
        fire_nb(
            state, p0, p1, width, mode, bias, has_bias, thresholds, leaks, out, scratch.tmp, scratch.tmp_u
        )
        return out
    return fire_np(state, p0, p1, width, mode, bias, has_bias, thresholds, leaks)
