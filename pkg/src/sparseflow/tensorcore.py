"""BFloat16-emulated tensor arithmetic and the dense reference convolution.

Tensors are plain ``float32`` numpy arrays of shape ``(H, W, C)`` whose values
are all exactly representable in BFloat16. Every arithmetic step below rounds
its float32 result back to BFloat16 (round-to-nearest-even), which emulates a
16-bit neuron datapath.
"""
from __future__ import annotations

import numpy as np

CANONICAL_NAN = np.uint16(0x7FC0)
# largest BFloat16 below 1; softsign saturates here instead of rounding up to 1
SOFTSIGN_MAX = np.float32(1 - 2**-8)


def bf16_bits(x) -> np.ndarray:
    """Return the 16-bit BFloat16 pattern nearest to ``x`` (cast to float32 first)."""
    a = np.asarray(x, dtype=np.float32)
    u = np.ascontiguousarray(a).reshape(a.shape).view(np.uint32)
    is_nan = (u & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    with np.errstate(over="ignore"):
        rounded = (u + np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
    out = np.where(is_nan, np.uint32(CANONICAL_NAN), rounded).astype(np.uint16)
    return out


def bf16_from_bits(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << np.uint32(16)
    return b.view(np.float32)


def bf16_round(x) -> np.ndarray:
    """Round to the nearest BFloat16 value, returned as float32.

    >>> float(bf16_round(1.00390625))
    1.0
    """
    return bf16_from_bits(bf16_bits(x))


def is_bf16(x) -> bool:
    a = np.asarray(x, dtype=np.float32)
    return bool(np.all((a.view(np.uint32) & np.uint32(0xFFFF)) == 0))


def _check_tensor(x, name="input"):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"{name} must be (H, W, C), got shape {x.shape}")
    return x


def dense_conv2d(x, weights, bias=None, init=None) -> np.ndarray:
    """Stride-1, same-zero-padded convolution with per-step BFloat16 rounding.

    ``weights`` has layout ``(K, K, Cin, Cout)`` and output pixel ``(oy, ox)``
    reads input ``(oy + ky - K//2, ox + kx - K//2)``. Each output neuron
    accumulates its contributions in a fixed order: receptive-field pixels in
    row-major order, then input channels ascending. Zero inputs are skipped.
    Every product and every partial sum is rounded to BFloat16.

    ``init`` seeds the accumulators (used for membranes and recurrent
    pre-states); ``bias`` is added once after accumulation.
    """
    x = bf16_round(_check_tensor(x))
    w = bf16_round(np.asarray(weights, dtype=np.float32))
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ValueError(f"weights must be (K, K, Cin, Cout), got {w.shape}")
    k, _, cin, cout = w.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    h, wd, c = x.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    r = k // 2
    if init is None:
        acc = np.zeros((h, wd, cout), dtype=np.float32)
    else:
        acc = bf16_round(np.asarray(init, dtype=np.float32)).copy()
        if acc.shape != (h, wd, cout):
            raise ValueError(f"init must have shape {(h, wd, cout)}, got {acc.shape}")
    xp = np.zeros((h + 2 * r, wd + 2 * r, cin), dtype=np.float32)
    xp[r : r + h, r : r + wd] = x
    for ky in range(k):
        for kx in range(k):
            window = xp[ky : ky + h, kx : kx + wd]
            for ci in range(cin):
                v = window[:, :, ci]
                live = v != 0
                if not live.any():
                    continue
                prod = bf16_round(v[:, :, None] * w[ky, kx, ci][None, None, :])
                summed = bf16_round(acc + prod)
                acc = np.where(live[:, :, None], summed, acc)
    if bias is not None:
        b = bf16_round(np.asarray(bias, dtype=np.float32).reshape(-1))
        if b.shape[0] != cout:
            raise ValueError(f"bias has {b.shape[0]} entries, expected {cout}")
        acc = bf16_round(acc + b)
    return acc


def fatrelu(x, thresholds) -> np.ndarray:
    """Forced-activation-threshold ReLU: keep ``x`` only where ``x > T[c]``."""
    x = np.asarray(x, dtype=np.float32)
    t = np.asarray(thresholds, dtype=np.float32).reshape(-1)
    if np.any(~(t > 0)):
        raise ValueError("FATReLU thresholds must be strictly positive")
    if t.shape[0] not in (1, x.shape[-1]):
        raise ValueError(f"{t.shape[0]} thresholds for {x.shape[-1]} channels")
    return np.where(x > t, x, np.float32(0)).astype(np.float32)


def softsign(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    y = bf16_round(x / (np.float32(1) + np.abs(x)))
    return np.clip(y, -SOFTSIGN_MAX, SOFTSIGN_MAX)


def maxpool2x2(x) -> np.ndarray:
    x = _check_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 max-pooling needs even spatial size, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))
