"""Synthetic weight matrices with outliers concentrated in a few channels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .tensor_io import FloatTensor, _check_axis


@dataclass
class GenSpec:
    rows: int
    cols: int
    base_std: float = 0.02
    outlier_channel_fraction: float = 0.1
    outlier_magnitude_mult: float = 8.0
    outlier_density_within_channel: float = 0.02
    seed: int = 0
    channel_axis: str = "row"

    def validate(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError("rows and cols must be positive")
        if not self.base_std > 0:
            raise ValidationError("base_std must be positive")
        if not 0.0 <= self.outlier_channel_fraction <= 1.0:
            raise ValidationError("outlier_channel_fraction must be in [0, 1]")
        if not 0.0 <= self.outlier_density_within_channel <= 1.0:
            raise ValidationError("outlier_density_within_channel must be in [0, 1]")
        if not self.outlier_magnitude_mult >= 1.0:
            raise ValidationError("outlier_magnitude_mult must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a u64")
        _check_axis(self.channel_axis)

    def to_dict(self) -> dict:
        return asdict(self)


def gen(spec: GenSpec) -> FloatTensor:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w = rng.normal(0.0, spec.base_std, size=(spec.rows, spec.cols))
    ch = w if spec.channel_axis == "row" else w.T
    n_ch, length = ch.shape
    n_out = int(round(spec.outlier_channel_fraction * n_ch))
    picked = np.sort(rng.choice(n_ch, size=n_out, replace=False))
    hit = rng.random((n_out, length)) < spec.outlier_density_within_channel
    ch[picked] = np.where(hit, ch[picked] * spec.outlier_magnitude_mult, ch[picked])
    return FloatTensor(w.astype(np.float32), channel_axis=spec.channel_axis, name="synthetic")
