"""Bit-exact packing of quantized clusters into 7-byte blocks.

A block covers eight clusters (24 weights)::

    byte 0      index: four 2-bit scheme codes, pair 0 in bits [7:6],
                pair 1 in [5:4], pair 2 in [3:2], pair 3 in [1:0]
    bytes 1-6   payload: eight 6-bit cluster fields, MSB first,
                cluster 0 in the top six bits of byte 1

Cluster fields are sign-magnitude:

    scheme 00   three 2-bit fields  s|m   (m = |q| / 3, one per value)
    scheme 0k   two 3-bit fields    s|mm  (the two surviving values)

Zero is always encoded with a clear sign bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import TruncatedError, ValidationError
from .quant import QuantizedCluster, QuantizedTensor, SchemeCode
from .tensor_io import BLOCK_BYTES, CLUSTERS_PER_BLOCK, PackedTensor

PAYLOAD_BYTES = BLOCK_BYTES - 1
FIELD_BITS = 6

# surviving positions for ZERO_FIRST / ZERO_SECOND / ZERO_THIRD
_SURVIVORS = np.array([[1, 2], [0, 2], [0, 1]])


class NonCanonicalZeroWarning(UserWarning):
    """A decoded field carried a negative zero; it was normalised to +0."""


@dataclass(frozen=True)
class PackedBlock:
    index_byte: int
    payload: bytes

    def __post_init__(self):
        if not 0 <= self.index_byte <= 0xFF or len(self.payload) != PAYLOAD_BYTES:
            raise ValidationError("a block is one index byte and six payload bytes")

    def to_bytes(self) -> bytes:
        return bytes([self.index_byte]) + bytes(self.payload)

    @classmethod
    def from_bytes(cls, raw) -> "PackedBlock":
        raw = bytes(raw)
        if len(raw) != BLOCK_BYTES:
            raise ValidationError(f"a block is {BLOCK_BYTES} bytes, got {len(raw)}")
        return cls(raw[0], raw[1:])


def _check_grid(schemes: np.ndarray, q: np.ndarray):
    q = q.astype(np.int16)
    if np.any(np.abs(q) > 3):
        raise ValidationError("value outside the signed 3-bit grid")
    all2 = schemes == 0
    if np.any(all2[..., None] & (q % 3 != 0)):
        raise ValidationError("2-bit cluster holds a value outside {-3, 0, 3}")
    pos = np.arange(3)
    zeroed = (schemes[..., None] > 0) & (pos == schemes[..., None].astype(np.int16) - 1)
    if np.any(zeroed & (q != 0)):
        raise ValidationError("outlier cluster has a non-zero value at its zeroed position")


def _encode_fields(schemes: np.ndarray, q: np.ndarray) -> np.ndarray:
    """6-bit field per cluster; ``schemes`` is ``(...)``, ``q`` is ``(..., 3)``."""
    q = q.astype(np.int16)
    sign = (q < 0).astype(np.uint16)
    mag = np.abs(q).astype(np.uint16)
    two = (sign << 1) | (mag // 3)
    f2 = (two[..., 0] << 4) | (two[..., 1] << 2) | two[..., 2]
    three = (sign << 2) | mag
    k = np.clip(schemes.astype(np.int64) - 1, 0, 2)
    keep = _SURVIVORS[k]
    a = np.take_along_axis(three, keep[..., :1], axis=-1)[..., 0]
    b = np.take_along_axis(three, keep[..., 1:], axis=-1)[..., 0]
    f3 = (a << 3) | b
    return np.where(schemes == 0, f2, f3).astype(np.uint64)


def _decode_fields(schemes: np.ndarray, fields: np.ndarray):
    """Inverse of :func:`_encode_fields`; also returns a negative-zero count."""
    f = fields.astype(np.int16)
    shape = f.shape + (3,)
    # 2-bit path
    two = np.stack([(f >> 4) & 3, (f >> 2) & 3, f & 3], axis=-1)
    s2 = two >> 1
    m2 = (two & 1) * 3
    # 3-bit path
    three = np.stack([(f >> 3) & 7, f & 7], axis=-1)
    s3 = three >> 2
    m3 = three & 3
    k = np.clip(schemes.astype(np.int64) - 1, 0, 2)
    keep = _SURVIVORS[k]
    mag3 = np.zeros(shape, dtype=np.int16)
    sgn3 = np.zeros(shape, dtype=np.int16)
    np.put_along_axis(mag3, keep, m3, axis=-1)
    np.put_along_axis(sgn3, keep, s3, axis=-1)
    is2 = (schemes == 0)[..., None]
    mag = np.where(is2, m2, mag3)
    sgn = np.where(is2, s2, sgn3)
    bad = int(np.count_nonzero((sgn == 1) & (mag == 0)))
    q = np.where(sgn == 1, -mag, mag).astype(np.int8)
    return q, bad


def _pack_blocks(schemes: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``schemes`` ``(B, 8)``, ``q`` ``(B, 8, 3)`` -> ``(B, 7)`` uint8."""
    pair = schemes.reshape(-1, 4, 2)
    if np.any(pair[..., 0] != pair[..., 1]):
        raise ValidationError("adjacent clusters (2i, 2i+1) must share a scheme")
    _check_grid(schemes, q)
    codes = pair[..., 0].astype(np.uint16)
    index = (codes[:, 0] << 6) | (codes[:, 1] << 4) | (codes[:, 2] << 2) | codes[:, 3]
    fields = _encode_fields(schemes, q)
    shifts = np.uint64(FIELD_BITS) * np.arange(CLUSTERS_PER_BLOCK - 1, -1, -1, dtype=np.uint64)
    payload = np.bitwise_or.reduce(fields << shifts, axis=-1)
    byte_shifts = np.uint64(8) * np.arange(PAYLOAD_BYTES - 1, -1, -1, dtype=np.uint64)
    pbytes = (payload[:, None] >> byte_shifts) & np.uint64(0xFF)
    out = np.empty((schemes.shape[0], BLOCK_BYTES), dtype=np.uint8)
    out[:, 0] = index
    out[:, 1:] = pbytes
    return out


def _unpack_blocks(raw: np.ndarray):
    """``(B, 7)`` uint8 -> schemes ``(B, 8)``, q ``(B, 8, 3)``, negative-zero count."""
    raw = raw.astype(np.uint64)
    index = raw[:, 0]
    codes = np.stack([(index >> np.uint64(s)) & np.uint64(3) for s in (6, 4, 2, 0)], axis=-1)
    schemes = np.repeat(codes, 2, axis=-1).astype(np.uint8)
    byte_shifts = np.uint64(8) * np.arange(PAYLOAD_BYTES - 1, -1, -1, dtype=np.uint64)
    payload = np.bitwise_or.reduce(raw[:, 1:] << byte_shifts, axis=-1)
    shifts = np.uint64(FIELD_BITS) * np.arange(CLUSTERS_PER_BLOCK - 1, -1, -1, dtype=np.uint64)
    fields = (payload[:, None] >> shifts) & np.uint64(0x3F)
    q, bad = _decode_fields(schemes, fields)
    return schemes, q, bad


def pack_block(clusters: Sequence[QuantizedCluster]) -> PackedBlock:
    if len(clusters) != CLUSTERS_PER_BLOCK:
        raise ValidationError(f"a block packs exactly 8 clusters, got {len(clusters)}")
    schemes = np.array([[int(c.scheme) for c in clusters]], dtype=np.uint8)
    q = np.array([[list(c.q) for c in clusters]], dtype=np.int16)
    if q.shape != (1, CLUSTERS_PER_BLOCK, 3):
        raise ValidationError("each cluster holds exactly 3 values")
    return PackedBlock.from_bytes(_pack_blocks(schemes, q)[0].tobytes())


def unpack_block(b) -> list:
    raw = b.to_bytes() if isinstance(b, PackedBlock) else bytes(b)
    if len(raw) != BLOCK_BYTES:
        raise ValidationError(f"a block is {BLOCK_BYTES} bytes, got {len(raw)}")
    schemes, q, bad = _unpack_blocks(np.frombuffer(raw, dtype=np.uint8)[None])
    if bad:
        warnings.warn(f"{bad} negative-zero field(s) normalised", NonCanonicalZeroWarning, stacklevel=2)
    return [
        QuantizedCluster(SchemeCode(int(s)), tuple(int(x) for x in qq))
        for s, qq in zip(schemes[0], q[0])
    ]


def pack_tensor(q: QuantizedTensor) -> PackedTensor:
    n_ch, n = q.schemes.shape
    n_blocks = math.ceil(n / CLUSTERS_PER_BLOCK)
    total = n_blocks * CLUSTERS_PER_BLOCK
    schemes = np.zeros((n_ch, total), dtype=np.uint8)
    vals = np.zeros((n_ch, total, 3), dtype=np.int16)
    schemes[:, :n] = q.schemes
    vals[:, :n] = q.q
    if n % 2:
        # the trailing odd cluster's padding partner inherits its scheme
        schemes[:, n] = q.schemes[:, n - 1]
    raw = _pack_blocks(schemes.reshape(-1, CLUSTERS_PER_BLOCK), vals.reshape(-1, CLUSTERS_PER_BLOCK, 3))
    return PackedTensor(
        rows=q.rows,
        cols=q.cols,
        channel_axis=q.channel_axis,
        cluster_counts=np.full(n_ch, n, dtype=np.uint32),
        scales=q.scales,
        blocks=raw.tobytes(),
    )


def unpack_tensor(p: PackedTensor) -> QuantizedTensor:
    expected = p.n_channels * p.blocks_per_channel * BLOCK_BYTES
    if len(p.blocks) < expected:
        raise TruncatedError(f"block stream holds {len(p.blocks)} bytes, expected {expected}")
    raw = p.block_array().reshape(-1, BLOCK_BYTES)
    schemes, vals, bad = _unpack_blocks(raw)
    if bad:
        warnings.warn(f"{bad} negative-zero field(s) normalised", NonCanonicalZeroWarning, stacklevel=2)
    n = int(p.cluster_counts[0])
    schemes = schemes.reshape(p.n_channels, -1)[:, :n]
    vals = vals.reshape(p.n_channels, -1, 3)[:, :n]
    return QuantizedTensor(p.rows, p.cols, p.channel_axis, p.scales, schemes, vals)
