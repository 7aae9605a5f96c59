"""Fine-grained intra-cluster weight quantization.

Every channel gets one scale ``s3 = max|w| / 3``.  The channel is cut into
clusters of three weights.  A cluster whose largest magnitude exceeds four
times its smallest drops the smallest weight and stores the other two on the
signed 3-bit grid {-3..3}.  Any other cluster stores all three weights at
2 bits, lifted onto the 3-bit grid as {-3, 0, 3} so that one scale serves
both encodings.  Adjacent clusters (2i, 2i+1) must share an encoding. When
their individual choices disagree, the scheme with the lowest joint squared
error is used for both.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .tensor_io import (
    CLUSTER_SIZE,
    CLUSTERS_PER_BLOCK,
    BLOCK_BYTES,
    HEADER_BYTES,
    FloatTensor,
    _check_axis,
)

OUTLIER_RATIO = 4.0
GRID_MAX = 3  # 2**(3-1) - 1


class SchemeCode(IntEnum):
    ALL2 = 0
    ZERO_FIRST = 1
    ZERO_SECOND = 2
    ZERO_THIRD = 3

    @property
    def bits(self) -> str:
        return format(int(self), "02b")

    @property
    def zero_position(self) -> Optional[int]:
        return None if self is SchemeCode.ALL2 else int(self) - 1


class PaddingOverheadWarning(UserWarning):
    """Channel length is not a multiple of 24, so padding inflates bits/weight."""


class ChannelQuantParams(NamedTuple):
    s3: float

    @property
    def s2(self) -> float:
        return 3.0 * self.s3


class QuantizedCluster(NamedTuple):
    scheme: SchemeCode
    q: tuple


@dataclass
class QuantConfig:
    channel_axis: Optional[str] = None  # None: use the tensor's own axis
    harmonize: bool = True
    threads: Optional[int] = None  # None: FINEQ_THREADS or 1


@dataclass(eq=False)
class QuantizedTensor:
    """Unpacked quantized form; arrays are indexed ``[channel, cluster, pos]``."""

    rows: int
    cols: int
    channel_axis: str
    scales: np.ndarray  # (C,) float32
    schemes: np.ndarray  # (C, n_clusters) uint8
    q: np.ndarray  # (C, n_clusters, 3) int8

    def __post_init__(self):
        _check_axis(self.channel_axis)
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.schemes = np.asarray(self.schemes, dtype=np.uint8)
        self.q = np.asarray(self.q, dtype=np.int8)
        n = math.ceil(self.channel_len / CLUSTER_SIZE)
        c = self.n_channels
        if (
            self.scales.shape != (c,)
            or self.schemes.shape != (c, n)
            or self.q.shape != (c, n, CLUSTER_SIZE)
        ):
            raise ValidationError("quantized tensor arrays do not match its dims")

    @property
    def n_channels(self) -> int:
        return self.rows if self.channel_axis == "row" else self.cols

    @property
    def channel_len(self) -> int:
        return self.cols if self.channel_axis == "row" else self.rows

    @property
    def n_clusters(self) -> int:
        return self.schemes.shape[1]

    def channel_values(self) -> np.ndarray:
        """Integer grid values per channel with tail padding removed."""
        return self.q.reshape(self.n_channels, -1)[:, : self.channel_len]

    def int_matrix(self) -> np.ndarray:
        """Integer grid values laid out as the original ``rows x cols`` matrix."""
        v = self.channel_values()
        return v if self.channel_axis == "row" else v.T

    def clusters(self, channel: int) -> list:
        return [
            QuantizedCluster(SchemeCode(int(s)), tuple(int(x) for x in qq))
            for s, qq in zip(self.schemes[channel], self.q[channel])
        ]

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            (self.rows, self.cols, self.channel_axis)
            == (other.rows, other.cols, other.channel_axis)
            and self.scales.tobytes() == other.scales.tobytes()
            and np.array_equal(self.schemes, other.schemes)
            and np.array_equal(self.q, other.q)
        )


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def thread_count(requested: Optional[int] = None) -> int:
    if requested is None:
        env = os.environ.get("FINEQ_THREADS", "").strip()
        if not env:
            return 1
        try:
            requested = int(env)
        except ValueError as exc:
            raise ValidationError(f"FINEQ_THREADS must be an integer, got {env!r}") from exc
    if requested < 1:
        raise ValidationError("thread count must be >= 1")
    return requested


# -- scalar API -------------------------------------------------------------


def channel_scale(channel) -> ChannelQuantParams:
    w = np.asarray(channel, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("channel is empty")
    return ChannelQuantParams(float(_scales(np.abs(w).max(keepdims=True))[0]))


def _as_cluster(c) -> np.ndarray:
    v = np.asarray(c, dtype=np.float64)
    if v.shape != (CLUSTER_SIZE,):
        raise ValidationError(f"a cluster holds exactly 3 values, got shape {v.shape}")
    return v


def select_scheme(c) -> SchemeCode:
    return SchemeCode(int(_select(_as_cluster(c)[None])[0]))


def quantize_cluster(c, scheme, p: ChannelQuantParams) -> QuantizedCluster:
    v = _as_cluster(c)
    scheme = SchemeCode(scheme)
    q = _quantize(v[None], np.array([int(scheme)]), np.array([p.s3]))[0]
    return QuantizedCluster(scheme, tuple(int(x) for x in q))


def dequantize_cluster(qc: QuantizedCluster, p: ChannelQuantParams) -> tuple:
    return tuple(float(x) * p.s3 for x in qc.q)


def harmonize_pair(c_even, c_odd, p: ChannelQuantParams) -> SchemeCode:
    pair = np.stack([_as_cluster(c_even), _as_cluster(c_odd)])[None]
    s = _select(pair)
    out = _harmonize(pair, s, np.array([p.s3]))
    return SchemeCode(int(out[0, 0]))


def pair_losses(c_even, c_odd, p: ChannelQuantParams) -> np.ndarray:
    """Joint squared error of the pair under each of the four schemes."""
    pair = np.stack([_as_cluster(c_even), _as_cluster(c_odd)])[None]
    return _pair_losses(pair, np.array([p.s3]))[0]


# -- vectorised kernels -----------------------------------------------------


def _scales(absmax: np.ndarray) -> np.ndarray:
    """s3 per channel, rounded to the stored f32 value."""
    return (np.asarray(absmax, dtype=np.float64) / GRID_MAX).astype(np.float32)


def _select(clusters: np.ndarray) -> np.ndarray:
    mags = np.abs(clusters)
    big = mags.max(axis=-1)
    small = mags.min(axis=-1)
    outlier = big > OUTLIER_RATIO * small
    # argmin returns the first minimum: ties go to the lowest index
    k = mags.argmin(axis=-1)
    return np.where(outlier, k + 1, 0).astype(np.uint8)


def _quantize(clusters: np.ndarray, schemes: np.ndarray, s3: np.ndarray) -> np.ndarray:
    """Quantize ``(..., 3)`` clusters; ``s3`` broadcasts against ``schemes``."""
    v = np.asarray(clusters, dtype=np.float64)
    s3 = np.broadcast_to(np.asarray(s3, dtype=np.float64), np.shape(schemes))[..., None]
    schemes = np.asarray(schemes)[..., None]
    live = s3 > 0
    denom = np.where(live, s3, 1.0)
    r3 = np.clip(round_half_away(v / denom), -GRID_MAX, GRID_MAX)
    r2 = GRID_MAX * np.clip(round_half_away(v / (GRID_MAX * denom)), -1, 1)
    q = np.where(schemes == 0, r2, r3)
    pos = np.arange(CLUSTER_SIZE)
    q = np.where((schemes > 0) & (pos == schemes - 1), 0.0, q)
    q = np.where(live, q, 0.0)
    return q.astype(np.int8)


def _pair_losses(pairs: np.ndarray, s3: np.ndarray) -> np.ndarray:
    """``pairs`` is ``(..., 2, 3)``; returns ``(..., 4)`` joint squared errors."""
    v = np.asarray(pairs, dtype=np.float64)
    s = np.asarray(s3, dtype=np.float64)
    out = []
    for code in range(4):
        sch = np.full(v.shape[:-1], code)
        q = _quantize(v, sch, s[..., None])
        err = v - q * s[..., None, None]
        out.append((err * err).sum(axis=(-1, -2)))
    return np.stack(out, axis=-1)


def _harmonize(pairs: np.ndarray, individual: np.ndarray, s3: np.ndarray) -> np.ndarray:
    """Resolve each ``(..., 2)`` scheme pair; returns schemes of the same shape."""
    a, b = individual[..., 0], individual[..., 1]
    agree = a == b
    out = individual.copy()
    if agree.all():
        return out
    losses = _pair_losses(pairs[~agree], np.broadcast_to(s3, agree.shape)[~agree])
    best = losses.argmin(axis=-1).astype(np.uint8)  # ties: lowest code
    out[~agree] = best[:, None]
    return out


def _quantize_channels(ch: np.ndarray, harmonize: bool):
    """Quantize a ``(C, L)`` block of channels."""
    n_ch, length = ch.shape
    n = math.ceil(length / CLUSTER_SIZE)
    padded = np.zeros((n_ch, n * CLUSTER_SIZE), dtype=np.float64)
    padded[:, :length] = ch
    clusters = padded.reshape(n_ch, n, CLUSTER_SIZE)
    s3 = _scales(np.abs(ch).max(axis=1))
    s3_64 = s3.astype(np.float64)
    schemes = _select(clusters)
    n_pairs = n // 2
    if n_pairs:
        head = clusters[:, : 2 * n_pairs].reshape(n_ch, n_pairs, 2, CLUSTER_SIZE)
        ind = schemes[:, : 2 * n_pairs].reshape(n_ch, n_pairs, 2)
        if harmonize:
            res = _harmonize(head, ind, s3_64[:, None])
        else:
            # the leading cluster's choice is imposed on its partner
            res = np.repeat(ind[..., :1], 2, axis=-1)
        schemes[:, : 2 * n_pairs] = res.reshape(n_ch, 2 * n_pairs)
    q = _quantize(clusters, schemes, s3_64[:, None])
    return s3, schemes, q


def quantize_matrix(t: FloatTensor, cfg: Optional[QuantConfig] = None) -> QuantizedTensor:
    cfg = cfg or QuantConfig()
    if not isinstance(t, FloatTensor):
        t = FloatTensor(t)
    axis = _check_axis(cfg.channel_axis or t.channel_axis)
    ch = (t.data if axis == "row" else t.data.T).astype(np.float64)
    workers = min(thread_count(cfg.threads), ch.shape[0])
    if workers <= 1:
        s3, schemes, q = _quantize_channels(ch, cfg.harmonize)
    else:
        chunks = np.array_split(ch, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _quantize_channels(c, cfg.harmonize), chunks))
        s3 = np.concatenate([p[0] for p in parts])
        schemes = np.concatenate([p[1] for p in parts])
        q = np.concatenate([p[2] for p in parts])
    return QuantizedTensor(t.rows, t.cols, axis, s3, schemes, q)


def dequantize_matrix(q: QuantizedTensor) -> FloatTensor:
    vals = q.channel_values().astype(np.float64) * q.scales.astype(np.float64)[:, None]
    data = vals if q.channel_axis == "row" else vals.T
    return FloatTensor(data.astype(np.float32), channel_axis=q.channel_axis)


def sacrificed_mask(q: QuantizedTensor) -> np.ndarray:
    """Boolean ``rows x cols`` mask of weights zeroed by an outlier scheme."""
    pos = np.arange(CLUSTER_SIZE)
    s = q.schemes[..., None].astype(np.int16)
    m = ((s > 0) & (pos == s - 1)).reshape(q.n_channels, -1)[:, : q.channel_len]
    return m if q.channel_axis == "row" else m.T


def protected_mask(q: QuantizedTensor) -> np.ndarray:
    """Surviving weights of outlier-scheme clusters (stored at 3 bits)."""
    s = np.repeat(q.schemes > 0, CLUSTER_SIZE, axis=1)[:, : q.channel_len]
    s = s if q.channel_axis == "row" else s.T
    return s & ~sacrificed_mask(q)


def payload_bits(q: QuantizedTensor) -> int:
    blocks = math.ceil(q.n_clusters / CLUSTERS_PER_BLOCK)
    return q.n_channels * blocks * BLOCK_BYTES * 8


def overhead_bits(q: QuantizedTensor) -> int:
    """Header, per-channel cluster counts and f32 scales."""
    return HEADER_BYTES * 8 + q.n_channels * 64


def average_bits(q: QuantizedTensor, warn: bool = True) -> float:
    """Payload bits per original weight (scales and header excluded)."""
    if warn and q.channel_len % (CLUSTER_SIZE * CLUSTERS_PER_BLOCK):
        warnings.warn(
            f"channel length {q.channel_len} is not a multiple of 24; "
            "block padding raises the average bit-width",
            PaddingOverheadWarning,
            stacklevel=2,
        )
    return payload_bits(q) / (q.rows * q.cols)


def average_bits_total(q: QuantizedTensor) -> float:
    return (payload_bits(q) + overhead_bits(q)) / (q.rows * q.cols)


def scheme_histogram(q: QuantizedTensor) -> dict:
    counts = np.bincount(q.schemes.ravel(), minlength=4)
    return {SchemeCode(i).bits: int(counts[i]) for i in range(4)}


def clusters_of(channel: Sequence[float]) -> np.ndarray:
    """Zero-pad a channel to a multiple of three and split it into clusters."""
    w = np.asarray(channel, dtype=np.float64)
    n = math.ceil(w.size / CLUSTER_SIZE)
    out = np.zeros(n * CLUSTER_SIZE)
    out[: w.size] = w
    return out.reshape(n, CLUSTER_SIZE)
