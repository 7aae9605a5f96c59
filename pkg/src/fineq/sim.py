"""Cycle-level model of the temporal-coding systolic array.

Dataflow is input stationary: PE(k, n) holds activation X[k][n] for the
duration of a tile.  Weight rows stream through one at a time.  Weight
w[m][k] is turned into a unary bitstream by the temporal encoder and
broadcast down PE column k.  Each cycle a PE passes its activation when the
incoming bit is 1 and zero otherwise.  The accumulator of output column n
applies the weight signs and reduces the K PE outputs with an adder tree.
Row m therefore takes L = max(1, max |w[m][k]|) cycles per tile with early
termination, or 3 cycles without it.

Stage accounting (cycles):

    memory_read   ceil(bytes_in / dma_bytes_per_cycle)
    decode        ceil(decoded_clusters / decoders)
    preload       one array row per cycle, per tile
    matmul        sum of L over rows, per tile
    vector        ceil(M * N / array_cols), identity pass-through
    writeback     ceil(bytes_out / dma_bytes_per_cycle)

``total_cycles`` is their sum, or their max when ``pipeline_overlap`` is set.
Both bounds are always reported.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .codec import PackedBlock, pack_tensor
from .errors import ValidationError
from .quant import QuantizedTensor
from .tensor_io import BLOCK_BYTES, CLUSTERS_PER_BLOCK, FloatTensor, PackedTensor, packed_size

MAX_MAGNITUDE = 3

STAGES = ("memory_read", "decode", "preload", "matmul", "vector", "writeback")
EVENT_KINDS = (
    "selector_activations",
    "adder_tree_ops",
    "psum_accumulations",
    "preload_writes",
    "decoded_clusters",
    "bytes_in",
    "bytes_out",
)


@dataclass
class SimConfig:
    array_rows: int = 64
    array_cols: int = 64
    decoders: int = 64
    bitstream_max_len: int = MAX_MAGNITUDE
    early_termination: bool = True
    pipeline_overlap: bool = False
    dma_bytes_per_cycle: int = 64
    energy_weights: dict = field(default_factory=lambda: {k: 1.0 for k in EVENT_KINDS})

    def __post_init__(self):
        for name in ("array_rows", "array_cols", "decoders", "dma_bytes_per_cycle"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.bitstream_max_len != MAX_MAGNITUDE:
            raise ValidationError("bitstream_max_len is fixed at 3 for the {0..3} magnitude grid")
        unknown = set(self.energy_weights) - set(EVENT_KINDS)
        if unknown:
            raise ValidationError(f"unknown energy event kinds: {sorted(unknown)}")
        self.energy_weights = {k: float(self.energy_weights.get(k, 1.0)) for k in EVENT_KINDS}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActivityStats:
    total_cycles: int = 0
    total_cycles_sequential: int = 0
    total_cycles_overlapped: int = 0
    stage_cycles: dict = field(default_factory=lambda: {s: 0 for s in STAGES})
    selector_activations: int = 0
    adder_tree_ops: int = 0
    psum_accumulations: int = 0
    preload_writes: int = 0
    decoded_clusters: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    tiles: int = 0
    max_abs_partial_sum: float = 0.0
    energy_proxy: float = 0.0

    def finalize(self, cfg: SimConfig) -> "ActivityStats":
        st = self.stage_cycles
        st["memory_read"] = math.ceil(self.bytes_in / cfg.dma_bytes_per_cycle)
        st["decode"] = math.ceil(self.decoded_clusters / cfg.decoders)
        st["writeback"] = math.ceil(self.bytes_out / cfg.dma_bytes_per_cycle)
        self.total_cycles_sequential = sum(st.values())
        self.total_cycles_overlapped = max(st.values())
        self.total_cycles = (
            self.total_cycles_overlapped if cfg.pipeline_overlap else self.total_cycles_sequential
        )
        self.energy_proxy = self.recompute_energy(cfg.energy_weights)
        return self

    def recompute_energy(self, weights: dict) -> float:
        return float(sum(weights[k] * getattr(self, k) for k in EVENT_KINDS))

    def counters(self) -> dict:
        """Event counters and stage cycles, excluding gauges."""
        d = {k: getattr(self, k) for k in EVENT_KINDS}
        d.update({f"{k}_cycles": v for k, v in self.stage_cycles.items()})
        d["tiles"] = self.tiles
        d["total_cycles_sequential"] = self.total_cycles_sequential
        return d

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Bitstream:
    bits: tuple
    sign: int = 1

    @property
    def value(self) -> int:
        return self.sign * sum(self.bits)


def temporal_encode(magnitude: int, length: int = MAX_MAGNITUDE, sign: int = 1) -> Bitstream:
    """Unary bitstream of ``length`` cycles whose ones-count is ``magnitude``.

    Models the encoder's counter/comparator: cycle t emits ``t < magnitude``.
    ``length`` is the broadcast group's stream length, which is shorter than
    3 only under early termination.
    """
    if not (isinstance(magnitude, (int, np.integer)) and 0 <= magnitude <= MAX_MAGNITUDE):
        raise ValidationError(f"magnitude must be an integer in 0..3, got {magnitude!r}")
    if not 1 <= length <= MAX_MAGNITUDE:
        raise ValidationError(f"stream length must be in 1..3, got {length}")
    if magnitude > length:
        raise ValidationError(f"magnitude {magnitude} does not fit a {length}-cycle stream")
    if sign not in (1, -1):
        raise ValidationError("sign must be +1 or -1")
    return Bitstream(tuple(int(t < magnitude) for t in range(length)), sign)


def group_length(magnitudes, early_termination: bool = True) -> int:
    if not early_termination:
        return MAX_MAGNITUDE
    return max(1, int(np.max(magnitudes, initial=0)))


# -- decoder ----------------------------------------------------------------


def _decode_cluster(code: int, field6: int) -> list:
    """Selector network for one cluster: three signed 3-bit weights."""
    if code == 0:
        out = []
        for shift in (4, 2, 0):
            f = (field6 >> shift) & 0b11
            sign, bit = f >> 1, f & 1
            mag = (bit << 1) | bit  # replicate the 2-bit magnitude into 3-bit width
            out.append(-mag if (sign and mag) else mag)
        return out
    hi, lo = (field6 >> 3) & 0b111, field6 & 0b111
    vals = []
    for f in (hi, lo):
        sign, mag = f >> 2, f & 0b11
        vals.append(-mag if (sign and mag) else mag)
    zero_at = code - 1
    vals.insert(zero_at, 0)
    return vals


def hw_decode(block) -> list:
    """Decode one 7-byte block into 24 signed weights."""
    raw = block.to_bytes() if isinstance(block, PackedBlock) else bytes(block)
    if len(raw) != BLOCK_BYTES:
        raise ValidationError(f"a block is {BLOCK_BYTES} bytes, got {len(raw)}")
    index = raw[0]
    payload = int.from_bytes(raw[1:], "big")
    out = []
    for c in range(CLUSTERS_PER_BLOCK):
        code = (index >> (6 - 2 * (c // 2))) & 0b11
        field6 = (payload >> (42 - 6 * c)) & 0x3F
        out.extend(_decode_cluster(code, field6))
    return out


def decode_stream(p: PackedTensor) -> np.ndarray:
    """Run every block through the decoder; returns ``(channels, len)`` int8."""
    blocks = p.block_array()
    n_ch, n_blk, _ = blocks.shape
    out = np.empty((n_ch, n_blk * 24), dtype=np.int8)
    for c in range(n_ch):
        row = []
        for b in range(n_blk):
            row.extend(hw_decode(blocks[c, b].tobytes()))
        out[c] = row
    return out[:, : p.channel_len]


# -- PE array ---------------------------------------------------------------


def pe_tile_matmul(
    w_tile: np.ndarray,
    x_tile: np.ndarray,
    stats: ActivityStats,
    cfg: Optional[SimConfig] = None,
) -> np.ndarray:
    """Multiply an integer weight tile by a preloaded activation tile.

    ``w_tile`` is ``(M, Kt)`` on the {-3..3} grid with ``Kt <= array_rows``;
    ``x_tile`` is ``(Kt, Nt)`` with ``Nt <= array_cols``.  Rows of ``w_tile``
    stream through the array sequentially; M is not bounded by the array.
    """
    cfg = cfg or SimConfig()
    w = np.asarray(w_tile)
    x = np.asarray(x_tile, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ValidationError(f"tile shapes {w.shape} and {x.shape} do not chain")
    kt, nt = x.shape
    if kt > cfg.array_rows or nt > cfg.array_cols:
        raise ValidationError(
            f"tile {kt}x{nt} exceeds the {cfg.array_rows}x{cfg.array_cols} PE array"
        )
    if np.any(np.abs(w) > MAX_MAGNITUDE):
        raise ValidationError("weight tile has values outside the {-3..3} grid")
    mag = np.abs(w).astype(np.int64)
    sign = np.where(w < 0, -1.0, 1.0)
    out = np.zeros((w.shape[0], nt), dtype=np.float64)

    stats.preload_writes += kt * nt
    stats.stage_cycles["preload"] += kt
    for m in range(w.shape[0]):
        length = group_length(mag[m], cfg.early_termination)
        acc = np.zeros(nt, dtype=np.float64)
        for t in range(length):
            bits = mag[m] > t  # encoder comparator: counter t vs stored magnitude
            stats.selector_activations += int(bits.sum()) * nt
            # PE selectors pass X[k] where the bit is set; ACC applies signs and reduces
            acc += (sign[m] * bits) @ x
            stats.adder_tree_ops += kt * nt
        stats.stage_cycles["matmul"] += length
        out[m] = acc
    return out


def _weights_and_scales(wq):
    """Integer matrix ``(M, K)`` plus per-row and per-column scale vectors."""
    packed = pack_tensor(wq) if isinstance(wq, QuantizedTensor) else wq
    if not isinstance(packed, PackedTensor):
        raise ValidationError("weights must be a QuantizedTensor or PackedTensor")
    ints = decode_stream(packed)
    scales = packed.scales.astype(np.float64)
    if packed.channel_axis == "row":
        return packed, ints, scales, np.ones(packed.cols)
    return packed, ints.T, np.ones(packed.rows), scales


def run_matmul(
    wq: Union[QuantizedTensor, PackedTensor],
    x: FloatTensor,
    cfg: Optional[SimConfig] = None,
):
    """Simulate ``Y = W @ X`` on the accelerator; returns ``(Y, stats)``."""
    cfg = cfg or SimConfig()
    xd = x.data if isinstance(x, FloatTensor) else np.asarray(x, dtype=np.float32)
    packed, w_int, row_scale, col_scale = _weights_and_scales(wq)
    m_dim, k_dim = w_int.shape
    if xd.ndim != 2 or xd.shape[0] != k_dim:
        raise ValidationError(f"inner dims disagree: W is {m_dim}x{k_dim}, X is {xd.shape}")
    n_dim = xd.shape[1]
    # column-axis scales are folded into the stationary activations
    xs = xd.astype(np.float64) * col_scale[:, None]

    stats = ActivityStats()
    stats.bytes_in = len(packed.to_bytes()) + 4 * k_dim * n_dim
    stats.bytes_out = 4 * m_dim * n_dim
    stats.decoded_clusters = len(packed.blocks) // BLOCK_BYTES * CLUSTERS_PER_BLOCK

    acc = np.zeros((m_dim, n_dim), dtype=np.float64)
    peak = 0.0
    for k0 in range(0, k_dim, cfg.array_rows):
        k1 = min(k0 + cfg.array_rows, k_dim)
        for n0 in range(0, n_dim, cfg.array_cols):
            n1 = min(n0 + cfg.array_cols, n_dim)
            part = pe_tile_matmul(w_int[:, k0:k1], xs[k0:k1, n0:n1], stats, cfg)
            if k0:
                stats.psum_accumulations += m_dim * (n1 - n0)
            acc[:, n0:n1] += part
            stats.tiles += 1
            peak = max(peak, float(np.abs(acc[:, n0:n1]).max(initial=0.0)))
    stats.max_abs_partial_sum = peak
    stats.stage_cycles["vector"] = math.ceil(m_dim * n_dim / cfg.array_cols)
    stats.finalize(cfg)
    y = acc * row_scale[:, None]
    return FloatTensor(y.astype(np.float32)), stats


def estimate(
    cfg: SimConfig,
    dims,
    magnitudes: Optional[np.ndarray] = None,
    channel_axis: str = "row",
) -> ActivityStats:
    """Closed-form activity prediction for ``(M, K, N)``.

    ``magnitudes`` is the ``M x K`` matrix of |w|.  Without it the prediction
    assumes every weight has magnitude 3, an upper bound on all counters.
    """
    m_dim, k_dim, n_dim = (int(d) for d in dims)
    if min(m_dim, k_dim, n_dim) < 1:
        raise ValidationError(f"dims must be positive, got {dims}")
    if magnitudes is None:
        mags = np.full((m_dim, k_dim), MAX_MAGNITUDE, dtype=np.int64)
    else:
        mags = np.abs(np.asarray(magnitudes)).astype(np.int64)
        if mags.shape != (m_dim, k_dim):
            raise ValidationError(f"magnitudes shape {mags.shape} != ({m_dim}, {k_dim})")

    r, c = cfg.array_rows, cfg.array_cols
    k_tiles = [(k0, min(k0 + r, k_dim)) for k0 in range(0, k_dim, r)]
    n_widths = [min(c, n_dim - n0) for n0 in range(0, n_dim, c)]
    n_tiles = len(n_widths)

    s = ActivityStats()
    s.tiles = len(k_tiles) * n_tiles
    for k0, k1 in k_tiles:
        kt = k1 - k0
        if cfg.early_termination:
            lengths = np.maximum(1, mags[:, k0:k1].max(axis=1))
        else:
            lengths = np.full(m_dim, MAX_MAGNITUDE)
        row_cycles = int(lengths.sum())
        s.stage_cycles["matmul"] += row_cycles * n_tiles
        s.stage_cycles["preload"] += kt * n_tiles
        s.adder_tree_ops += row_cycles * kt * n_dim
        s.preload_writes += kt * n_dim
    s.selector_activations = int(mags.sum()) * n_dim
    s.psum_accumulations = (len(k_tiles) - 1) * m_dim * n_dim
    n_ch, length = (m_dim, k_dim) if channel_axis == "row" else (k_dim, m_dim)
    n_blocks = math.ceil(math.ceil(length / 3) / CLUSTERS_PER_BLOCK)
    s.bytes_in = packed_size(m_dim, k_dim, channel_axis) + 4 * k_dim * n_dim
    s.bytes_out = 4 * m_dim * n_dim
    s.decoded_clusters = n_ch * n_blocks * CLUSTERS_PER_BLOCK
    s.stage_cycles["vector"] = math.ceil(m_dim * n_dim / c)
    return s.finalize(cfg)
