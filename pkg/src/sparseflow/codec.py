"""32-bit inter-core event words.

A pixel's outputs travel as one header word followed by payload words::

    header  = y[31:22] | x[21:12] | n[11:0]      n = number of ac./sp.
    AER     = channel[31:16] | bf16 value[15:0]  one word per activation
    bitmask = bit c set <=> channel c spiked     ceil(C/32) words per pixel

``SYNC_WORD`` marks the end of a frame.
"""
from __future__ import annotations

import numpy as np

from .tensorcore import bf16_bits, bf16_from_bits

AER = "aer"
BITMASK = "bitmask"
SCHEMES = (AER, BITMASK)

SYNC_WORD = 0xFFFFFFFF
MAX_COORD = 1022  # 1023 is reserved so a header can never equal SYNC_WORD
MAX_COUNT = 0xFFF


class CodecError(ValueError):
    pass


def words_per_pixel(n, scheme, channels):
    if scheme == AER:
        return n
    return -(-channels // 32)


def encode_events(chans, vals, scheme, channels=32) -> np.ndarray:
    """Payload words for one pixel's ``(channel, value)`` list."""
    chans = np.asarray(chans, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float32)
    if chans.shape != vals.shape:
        raise CodecError("channel and value lists differ in length")
    if chans.size and (chans.min() < 0 or chans.max() >= channels):
        raise CodecError(f"channel index out of range for {channels} channels")
    if scheme == AER:
        if channels > 0xFFFF + 1:
            raise CodecError("AER carries at most 65536 channels")
        return ((chans.astype(np.uint32) << np.uint32(16)) | bf16_bits(vals).astype(np.uint32)).astype(
            np.uint32
        )
    if scheme == BITMASK:
        if np.any(vals != 1):
            raise CodecError("bitmask scheme carries binary spikes only")
        words = np.zeros(-(-channels // 32), dtype=np.uint32)
        np.bitwise_or.at(words, chans // 32, (np.uint32(1) << (chans % 32).astype(np.uint32)))
        return words
    raise CodecError(f"unknown scheme {scheme!r}")


def decode_events(words, scheme, channels=32):
    """Inverse of :func:`encode_events`; returns ``(chans, vals)`` sorted by channel for bitmask."""
    words = np.asarray(words, dtype=np.uint32)
    if scheme == AER:
        chans = (words >> np.uint32(16)).astype(np.int64)
        vals = bf16_from_bits((words & np.uint32(0xFFFF)).astype(np.uint16)).copy()
        return chans, vals
    if scheme == BITMASK:
        if words.shape[0] != -(-channels // 32):
            raise CodecError(f"expected {-(-channels // 32)} bitmask words, got {words.shape[0]}")
        bits = (words[:, None] >> np.arange(32, dtype=np.uint32)[None, :]) & np.uint32(1)
        chans = np.flatnonzero(bits.reshape(-1))
        if chans.size and chans.max() >= channels:
            raise CodecError("bit set beyond the channel count")
        return chans.astype(np.int64), np.ones(chans.shape[0], dtype=np.float32)
    raise CodecError(f"unknown scheme {scheme!r}")


def encode_header(y, x, n):
    if not (0 <= y <= MAX_COORD and 0 <= x <= MAX_COORD):
        raise CodecError(f"pixel ({x}, {y}) exceeds the header coordinate range")
    if not (0 < n <= MAX_COUNT):
        raise CodecError(f"header count {n} outside 1..{MAX_COUNT}")
    return np.uint32((y << 22) | (x << 12) | n)


def decode_header(word):
    word = int(word)
    return word >> 22, (word >> 12) & 0x3FF, word & 0xFFF


def encode_packet(y, x, chans, vals, scheme, channels=32) -> np.ndarray:
    payload = encode_events(chans, vals, scheme, channels)
    head = encode_header(y, x, len(chans))
    return np.concatenate([np.array([head], dtype=np.uint32), payload])


def encode_stream(packets, scheme, channels=32, sync=True) -> np.ndarray:
    """Frame a sequence of ``(y, x, chans, vals)`` packets; silent pixels are skipped."""
    parts = [encode_packet(y, x, c, v, scheme, channels) for y, x, c, v in packets if len(c)]
    if sync:
        parts.append(np.array([SYNC_WORD], dtype=np.uint32))
    if not parts:
        return np.zeros(0, dtype=np.uint32)
    return np.concatenate(parts)


def decode_stream(words, scheme, channels=32):
    """Return ``(packets, synced)`` from a framed word stream."""
    words = np.asarray(words, dtype=np.uint32)
    packets = []
    i = 0
    while i < words.shape[0]:
        if words[i] == SYNC_WORD:
            return packets, True
        y, x, n = decode_header(words[i])
        nw = words_per_pixel(n, scheme, channels)
        payload = words[i + 1 : i + 1 + nw]
        if payload.shape[0] != nw:
            raise CodecError(f"stream truncated inside pixel ({x}, {y}) at word {i}")
        chans, vals = decode_events(payload, scheme, channels)
        if chans.shape[0] != n:
            raise CodecError(f"header announces {n} entries, payload holds {chans.shape[0]}")
        packets.append((y, x, chans, vals))
        i += 1 + nw
    return packets, False
