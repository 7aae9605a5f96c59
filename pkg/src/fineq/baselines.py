"""Single-precision reference quantizers: symmetric uniform and asymmetric RTN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .quant import round_half_away
from .tensor_io import FloatTensor


@dataclass
class BaselineResult:
    dequantized: FloatTensor
    bits: int
    method: str


def _check_bits(b):
    if not isinstance(b, (int, np.integer)) or not 2 <= b <= 8:
        raise ValidationError(f"bit-width must be an integer in [2, 8], got {b!r}")
    return int(b)


def _wrap(t: FloatTensor, channels: np.ndarray, b: int, method: str) -> BaselineResult:
    data = channels if t.channel_axis == "row" else channels.T
    return BaselineResult(FloatTensor(data.astype(np.float32), t.channel_axis), b, method)


def uniform_quantize(t: FloatTensor, b: int) -> BaselineResult:
    """Per-channel symmetric grid, s = max|w| / (2**(b-1) - 1)."""
    b = _check_bits(b)
    w = t.channels().astype(np.float64)
    qmax = 2 ** (b - 1) - 1
    s = (np.abs(w).max(axis=1) / qmax)[:, None]
    live = s > 0
    q = np.clip(round_half_away(w / np.where(live, s, 1.0)), -qmax, qmax)
    return _wrap(t, np.where(live, q * s, 0.0), b, "uniform")


def rtn_quantize(t: FloatTensor, b: int) -> BaselineResult:
    """Per-row asymmetric grid with scale and integer zero-point."""
    b = _check_bits(b)
    w = t.channels().astype(np.float64)
    levels = 2**b - 1
    lo = w.min(axis=1, keepdims=True)
    hi = w.max(axis=1, keepdims=True)
    scale = (hi - lo) / levels
    flat = scale == 0
    safe = np.where(flat, 1.0, scale)
    zp = round_half_away(-lo / safe)
    q = np.clip(round_half_away(w / safe) + zp, 0, levels)
    deq = np.where(flat, w, (q - zp) * safe)
    return _wrap(t, deq, b, "rtn")
